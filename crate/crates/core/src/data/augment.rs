use ndarray::{s, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;

/// Random rescale, crop and flip applied to training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Bounds, in pixels, for the longer image side after rescaling.
    pub rescale_range: (usize, usize),
    pub crop_size: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rescale_range: (80, 160),
            crop_size: 128,
            hflip_prob: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rescale_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "rescale range ({lo}, {hi}) must satisfy 0 < min <= max"
            )));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "flip probability {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        Ok(())
    }
}

/// Rescales the longer side of a `(3, H, W)` image to a uniform draw from
/// `rescale_range`, zero-pads bottom/right up to the crop size, takes a
/// uniformly placed `crop × crop` window and flips it horizontally with
/// `hflip_prob`.
pub fn augment<R: Rng + ?Sized>(image: ArrayView3<'_, f32>, cfg: &AugmentationConfig, rng: &mut R) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let target = rng.random_range(cfg.rescale_range.0..=cfg.rescale_range.1);
    let longer = h.max(w) as f64;
    let scale = target as f64 / longer;
    let new_h = ((h as f64 * scale).round() as usize).max(1);
    let new_w = ((w as f64 * scale).round() as usize).max(1);
    let scaled = ops::resize_bilinear(image, new_h, new_w);

    let crop = cfg.crop_size;
    let (ph, pw) = (new_h.max(crop), new_w.max(crop));
    let oy = rng.random_range(0..=ph - crop);
    let ox = rng.random_range(0..=pw - crop);
    let flip = rng.random_bool(cfg.hflip_prob);

    let mut out = Array3::<f32>::zeros((c, crop, crop));
    // Overlap of the crop window with the scaled content; the rest stays zero.
    let (y_end, x_end) = ((oy + crop).min(new_h), (ox + crop).min(new_w));
    if oy < y_end && ox < x_end {
        out.slice_mut(s![.., ..y_end - oy, ..x_end - ox])
            .assign(&scaled.slice(s![.., oy..y_end, ox..x_end]));
    }
    if flip {
        ops::hflip(out.view())
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| 0.1 + (c * 7 + y * 3 + x) as f32 / 4096.0)
    }

    #[test]
    fn degenerate_config_is_identity() {
        let cfg = AugmentationConfig {
            rescale_range: (512, 512),
            crop_size: 512,
            hflip_prob: 0.0,
        };
        let img = ramp(512, 512);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(img.view(), &cfg, &mut rng), img);
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = AugmentationConfig::default();
        let img = ramp(90, 140);
        let a = augment(img.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(img.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn small_image_is_padded_bottom_right() {
        // 100 wide, 50 tall, kept at scale 1.
        let cfg = AugmentationConfig {
            rescale_range: (100, 100),
            crop_size: 512,
            hflip_prob: 0.0,
        };
        let img = ramp(50, 100);
        let out = augment(img.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.dim(), (3, 512, 512));
        assert_eq!(out.slice(s![.., ..50, ..100]), img);
        assert!(out.slice(s![.., 50.., ..]).iter().all(|&v| v == 0.0));
        assert!(out.slice(s![.., .., 100..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn longer_side_is_rescaled() {
        let cfg = AugmentationConfig {
            rescale_range: (60, 60),
            crop_size: 64,
            hflip_prob: 0.0,
        };
        let img = Array3::from_elem((3, 40, 120), 1.0);
        let out = augment(img.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        // 120x40 -> 60x20 pasted at the origin.
        assert!(out.slice(s![.., ..20, ..60]).iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(out.slice(s![.., 20.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn validation() {
        let mut cfg = AugmentationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.rescale_range = (200, 100);
        assert!(cfg.validate().is_err());
        cfg.rescale_range = (100, 100);
        cfg.crop_size = 0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn output_is_always_crop_sized(h in 1usize..70, w in 1usize..70, lo in 1usize..60, extra in 0usize..40,
                                       crop in 1usize..50, p in 0.0f64..=1.0, seed in any::<u64>()) {
            let cfg = AugmentationConfig { rescale_range: (lo, lo + extra), crop_size: crop, hflip_prob: p };
            let out = augment(ramp(h, w).view(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(out.dim(), (3, crop, crop));
        }
    }
}
