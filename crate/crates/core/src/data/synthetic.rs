//! Toy segmentation benchmark: coloured geometric shapes on a textured
//! background, with pixel-accurate masks.
//!
//! Every class draws its colour from its own hue band on a low-saturation
//! background, so both colour and outline identify the class.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatasetDescriptor, DatasetItem, ImageSource, MaskSource};
use crate::cam::LabelVector;
use crate::error::{Error, Result};

/// Shape names understood by the generator.
pub const SHAPE_CATALOG: [&str; 6] = ["circle", "triangle", "rectangle", "cross", "diamond", "ring"];

/// Minimum gap in pixels between two shapes' bounding discs.
const SHAPE_GAP: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_ATTEMPTS: usize = 50;
/// Hue spread of one class, as a fraction of the spacing between classes.
const HUE_JITTER: f64 = 0.15;

/// `h`, `s`, `v` in `[0, 1]`; hue wraps.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_images: usize,
    /// `(W, H)` in pixels.
    pub canvas: (usize, usize),
    /// Names from [`SHAPE_CATALOG`]; the order fixes class indices.
    pub classes: Vec<String>,
    /// Inclusive range for the number of shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Inclusive range for the bounding radius of a shape, in pixels.
    pub radius_range: (f64, f64),
    /// Standard deviation of per-pixel Gaussian noise, in `[0, 1]` intensity units.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_images: 500,
            canvas: (128, 128),
            classes: vec!["circle".into(), "triangle".into(), "rectangle".into()],
            shapes_per_image: (1, 3),
            radius_range: (14.0, 28.0),
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Config("synthetic dataset needs at least one image".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("synthetic dataset needs at least one shape class".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !SHAPE_CATALOG.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "unknown shape `{c}`; choose from {}",
                    SHAPE_CATALOG.join(", ")
                )));
            }
            if self.classes[..i].contains(c) {
                return Err(Error::Config(format!("shape `{c}` listed twice")));
            }
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "shapes per image ({lo}, {hi}) must satisfy 1 <= min <= max"
            )));
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo >= 2.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "radius range ({rlo}, {rhi}) must satisfy 2 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!(
                "noise level {} outside [0, 1]",
                self.noise_level
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: usize,
    kind: &'static str,
    cx: f64,
    cy: f64,
    r: f64,
    angle: f64,
    aspect: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.r;
        let v = (-s * dx + c * dy) / self.r;
        match self.kind {
            "circle" => u * u + v * v <= 1.0,
            "ring" => (0.25..=1.0).contains(&(u * u + v * v)),
            "rectangle" => {
                // Corners touch the bounding circle.
                let hw = 1.0 / (1.0 + self.aspect * self.aspect).sqrt();
                u.abs() <= hw && v.abs() <= hw * self.aspect
            }
            "diamond" => u.abs() + v.abs() <= 1.0,
            "cross" => {
                let arm = 0.3;
                (u.abs() <= 1.0 && v.abs() <= arm) || (v.abs() <= 1.0 && u.abs() <= arm)
            }
            "triangle" => {
                // Equilateral, inscribed in the unit circle.
                (0..3).all(|k| {
                    let t = PI / 2.0 + TAU * k as f64 / 3.0 + PI / 3.0;
                    u * t.cos() + v * t.sin() <= 0.5
                })
            }
            other => unreachable!("validated shape {other}"),
        }
    }
}

/// Generates a dataset of `num_images` in-memory images with masks.
///
/// The first shape of image `i` has class `i mod C`, which gives every class
/// at least `floor(N / C)` images. Each image draws from its own random
/// stream, so the output depends only on the config.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<DatasetDescriptor> {
    cfg.validate()?;
    let (w, h) = cfg.canvas;
    if 2.0 * cfg.radius_range.0 > w.min(h) as f64 {
        return Err(Error::Generation(format!(
            "canvas {w}x{h} cannot hold a shape of radius {}",
            cfg.radius_range.0
        )));
    }
    let items = (0..cfg.num_images)
        .into_par_iter()
        .map(|i| generate_item(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    DatasetDescriptor::new(None, "train", cfg.classes.clone(), items)
}

fn generate_item(cfg: &SyntheticConfig, index: usize) -> Result<DatasetItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (w, h) = cfg.canvas;
    let num_classes = cfg.classes.len();
    let count = rng.random_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);

    let classes: Vec<usize> = (0..count)
        .map(|k| {
            if k == 0 {
                index % num_classes
            } else {
                rng.random_range(0..num_classes)
            }
        })
        .collect();
    let shapes = (0..LAYOUT_ATTEMPTS)
        .find_map(|_| place_shapes(cfg, &classes, &mut rng))
        .ok_or_else(|| {
            Error::Generation(format!(
                "canvas {w}x{h} is too small for {count} shapes of radius {}..{} (image {index})",
                cfg.radius_range.0, cfg.radius_range.1
            ))
        })?;

    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE)).expect("valid std");
    let grey = rng.random_range(0.25..0.75);
    let base: [f64; 3] = std::array::from_fn(|_| grey + rng.random_range(-0.1..0.1));
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let freq = rng.random_range(0.05..0.25);
            let dir = rng.random_range(0.0..TAU);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..TAU))
        })
        .collect();
    let colours: Vec<[f64; 3]> = shapes
        .iter()
        .map(|s| {
            let hue = (s.class as f64 + rng.random_range(-HUE_JITTER..HUE_JITTER)) / num_classes as f64;
            // Keep shapes visibly distinct from the background.
            let mut c = [0.0; 3];
            for _ in 0..100 {
                c = hsv_to_rgb(hue, rng.random_range(0.55..0.95), rng.random_range(0.5..1.0));
                if c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 0.45 {
                    break;
                }
            }
            c
        })
        .collect();

    let mut mask = Array2::<u8>::zeros((h, w));
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = shapes.iter().position(|s| s.contains(px, py));
            let colour = match hit {
                Some(k) => {
                    mask[[y, x]] = shapes[k].class as u8 + 1;
                    colours[k]
                }
                None => {
                    let t: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * px + fy * py + ph).sin()).sum();
                    base.map(|b| b + 0.12 * t)
                }
            };
            let rgb = colour.map(|v| ((v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x as u32, y as u32, Rgb(rgb));
        }
    }

    let mut present: Vec<usize> = mask.iter().filter(|&&v| v > 0).map(|&v| v as usize - 1).collect();
    present.sort_unstable();
    present.dedup();
    Ok(DatasetItem {
        id: format!("syn_{index:05}"),
        image: ImageSource::Memory(Arc::new(img)),
        labels: LabelVector::from_present(num_classes, &present)?,
        mask: Some(MaskSource::Memory(Arc::new(mask))),
    })
}

/// Places one shape per entry of `classes` without overlap, or gives up.
fn place_shapes(cfg: &SyntheticConfig, classes: &[usize], rng: &mut ChaCha8Rng) -> Option<Vec<Shape>> {
    let (w, h) = (cfg.canvas.0 as f64, cfg.canvas.1 as f64);
    let mut shapes: Vec<Shape> = Vec::with_capacity(classes.len());
    for &class in classes {
        let kind = SHAPE_CATALOG
            .iter()
            .copied()
            .find(|s| *s == cfg.classes[class])
            .expect("validated");
        let shape = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let r = rng.random_range(cfg.radius_range.0..=cfg.radius_range.1);
            if 2.0 * r > w.min(h) {
                return None;
            }
            let cx = rng.random_range(r..=w - r);
            let cy = rng.random_range(r..=h - r);
            let clear = shapes
                .iter()
                .all(|s| (s.cx - cx).hypot(s.cy - cy) >= s.r + r + SHAPE_GAP);
            clear.then(|| Shape {
                class,
                kind,
                cx,
                cy,
                r,
                angle: rng.random_range(0.0..TAU),
                aspect: rng.random_range(0.6..=1.0),
            })
        })?;
        shapes.push(shape);
    }
    Some(shapes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(num_images: usize, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            num_images,
            canvas: (48, 40),
            radius_range: (6.0, 10.0),
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(2.0 / 3.0, 1.0, 0.5), [0.0, 0.0, 0.5]);
        assert_eq!(hsv_to_rgb(-1.0 / 3.0, 0.0, 0.7), [0.7, 0.7, 0.7]);
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = make_synthetic(&small(12, 7)).unwrap();
        let b = make_synthetic(&small(12, 7)).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(&small(12, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn written_copies_are_byte_identical() {
        let ds = make_synthetic(&small(4, 7)).unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        super::super::write_dataset(&ds, d1.path()).unwrap();
        super::super::write_dataset(&ds, d2.path()).unwrap();
        for rel in [
            "classes.txt",
            "train.csv",
            "images/syn_00002.png",
            "masks/syn_00003.png",
        ] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
    }

    #[test]
    fn labels_match_mask_classes() {
        let ds = make_synthetic(&small(30, 1)).unwrap();
        for item in ds.items() {
            let mask = item.load_mask().unwrap().unwrap();
            for c in 0..3 {
                let in_mask = mask.iter().any(|&v| v as usize == c + 1);
                assert_eq!(in_mask, item.labels.is_present(c), "{} class {c}", item.id);
            }
        }
    }

    #[test]
    fn classes_are_balanced() {
        let cfg = SyntheticConfig {
            num_images: 500,
            canvas: (40, 40),
            radius_range: (5.0, 8.0),
            ..Default::default()
        };
        let ds = make_synthetic(&cfg).unwrap();
        for c in 0..3 {
            let n = ds.items().iter().filter(|i| i.labels.is_present(c)).count();
            assert!(n >= 50, "class {c}: {n}");
        }
    }

    #[test]
    fn tiny_canvas_is_a_generation_error() {
        let cfg = SyntheticConfig {
            canvas: (20, 20),
            ..small(3, 0)
        };
        assert!(matches!(make_synthetic(&cfg), Err(Error::Generation(_))));
        let crowded = SyntheticConfig {
            canvas: (24, 24),
            shapes_per_image: (4, 4),
            ..small(3, 0)
        };
        assert!(matches!(make_synthetic(&crowded), Err(Error::Generation(_))));
    }

    #[test]
    fn every_shape_kind_covers_pixels() {
        for (i, kind) in SHAPE_CATALOG.iter().enumerate() {
            let s = Shape {
                class: i,
                kind,
                cx: 10.0,
                cy: 10.0,
                r: 8.0,
                angle: 0.3,
                aspect: 0.8,
            };
            assert!((0..20)
                .flat_map(|y| (0..20).map(move |x| (x, y)))
                .any(|(x, y)| s.contains(x as f64, y as f64)));
            assert!(!s.contains(0.0, 0.0), "{kind}");
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = small(3, 0);
        cfg.classes = vec!["hexagon".into()];
        assert!(matches!(make_synthetic(&cfg), Err(Error::Config(_))));
        cfg.classes = vec!["circle".into(), "circle".into()];
        assert!(make_synthetic(&cfg).is_err());
    }
}
