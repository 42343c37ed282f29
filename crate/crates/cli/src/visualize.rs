//! CAM heatmap overlays: single-image, merged-tile and final multi-scale maps.

use std::path::Path;
use std::sync::LazyLock;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3};

use puzzlecam::cam::normalize_cams;
use puzzlecam::data::{image_to_tensor, read_rgb, write_rgb};
use puzzlecam::infer::{infer_cams, InferenceConfig};
use puzzlecam::{ops, CamStack, Classifier};

use crate::CliError;

static VIRIDIS: LazyLock<Vec<[u8; 3]>> = LazyLock::new(|| {
    include_str!("../data/viridis.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let v: Vec<u8> = l
                .split_whitespace()
                .map(|t| t.parse().expect("colormap entry"))
                .collect();
            [v[0], v[1], v[2]]
        })
        .collect()
});

fn runtime(e: puzzlecam::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Classes the model predicts as present (positive logit); the top class if
/// none is.
pub fn predicted_classes(logits: &[f32]) -> Vec<usize> {
    let present: Vec<usize> = (0..logits.len()).filter(|&k| logits[k] > 0.0).collect();
    if !present.is_empty() {
        return present;
    }
    let top = (0..logits.len()).fold(0, |best, k| if logits[k] > logits[best] { k } else { best });
    vec![top]
}

/// Per-pixel maximum over `classes` of a normalized stack.
pub fn heat(cams: &CamStack<f32>, classes: &[usize]) -> Array2<f32> {
    let (h, w) = cams.spatial();
    let maps = cams.maps();
    Array2::from_shape_fn((h, w), |(y, x)| {
        classes.iter().map(|&k| maps[[k, y, x]]).fold(0.0, f32::max)
    })
}

/// Blends the viridis colour of `heat` half and half with `base`.
pub fn overlay(base: &RgbImage, heat: &Array2<f32>) -> RgbImage {
    let lut = &*VIRIDIS;
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let v = heat[[y as usize, x as usize]].clamp(0.0, 1.0);
        let c = lut[(v * (lut.len() - 1) as f32).round() as usize];
        let p = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| (p[i] as u16 + c[i] as u16).div_ceil(2) as u8))
    })
}

fn upsampled(raw: &Array3<f32>, h: usize, w: usize) -> puzzlecam::Result<CamStack<f32>> {
    normalize_cams(&CamStack::raw(ops::resize_bilinear(raw.view(), h, w)))
}

/// The three normalized stacks shown for one image.
pub fn panels(
    model: &Classifier<f32>,
    image: ArrayView3<'_, f32>,
    cfg: &InferenceConfig,
) -> puzzlecam::Result<([CamStack<f32>; 3], Vec<usize>)> {
    let (_, h, w) = image.dim();
    let single = model.forward_single(image)?;
    let (merged, _) = model.forward_puzzle(image)?;
    let full = InferenceConfig {
        restrict_to_image_labels: false,
        ..cfg.clone()
    };
    let classes = predicted_classes(single.logits.as_slice().expect("contiguous logits"));
    Ok((
        [
            upsampled(single.raw_cams.maps(), h, w)?,
            upsampled(merged.maps(), h, w)?,
            infer_cams(model, image, None, &full)?,
        ],
        classes,
    ))
}

/// Writes `<stem>_single.png`, `<stem>_tiled.png` and `<stem>_final.png`.
pub fn render(model: &Classifier<f32>, path: &Path, cfg: &InferenceConfig, out: &Path) -> Result<(), CliError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Runtime(format!("{}: no file name", path.display())))?;
    let base = read_rgb(path).map_err(runtime)?;
    let tensor = image_to_tensor(&base);
    let (stacks, classes) = panels(model, tensor.view(), cfg).map_err(runtime)?;
    for (name, cams) in ["single", "tiled", "final"].iter().zip(&stacks) {
        let img = overlay(&base, &heat(cams, &classes));
        write_rgb(&out.join(format!("{stem}_{name}.png")), &img).map_err(runtime)?;
    }
    Ok(())
}
