//! Test-time CAM inference, pseudo-label synthesis, mIoU evaluation and the
//! CAM file format.

mod miou;
mod pcam;
mod pseudo;

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use miou::{evaluate_miou, ConfusionMatrix, MIoUReport};
pub use pcam::{export_cams, import_cams, PcamFile, PCAM_MAGIC, PCAM_VERSION};
pub use pseudo::{make_pseudo_labels, PseudoLabelConfig};

use crate::cam::{self, CamStack, LabelVector};
use crate::data::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::{ops, Real};

/// Scales and flips averaged at inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub scales: Vec<f64>,
    pub use_hflip: bool,
    /// Zero the maps of classes absent from the image labels, when given.
    pub restrict_to_image_labels: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.5, 1.0, 1.5, 2.0],
            use_hflip: true,
            restrict_to_image_labels: true,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("inference needs at least one scale".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("inference scale {s} must be positive")));
        }
        Ok(())
    }

    /// `(scale, flipped)` pairs in evaluation order.
    pub fn variants(&self) -> Vec<(f64, bool)> {
        let flips: &[bool] = if self.use_hflip { &[false, true] } else { &[false] };
        self.scales
            .iter()
            .flat_map(|&s| flips.iter().map(move |&f| (s, f)))
            .collect()
    }
}

/// Image size after scaling by `scale`, at least one pixel per side.
pub fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (f(h), f(w))
}

/// Raw CAMs of one `(scale, flip)` variant, upsampled to the input size and
/// un-flipped.
pub fn variant_cams<R: Real>(
    model: &Classifier<R>,
    image: ArrayView3<'_, R>,
    scale: f64,
    flip: bool,
) -> Result<Array3<R>> {
    let (_, h, w) = image.dim();
    let (sh, sw) = scaled_size(h, w, scale);
    let mut input = ops::resize_bilinear(image, sh, sw);
    if flip {
        input = ops::hflip(input.view());
    }
    let raw = model.forward_single(input.view())?.raw_cams.into_maps();
    let up = ops::resize_bilinear(raw.view(), h, w);
    Ok(if flip { ops::hflip(up.view()) } else { up })
}

/// Averages the raw CAMs of every configured variant at full image
/// resolution, then clamps and max-normalizes. With
/// `restrict_to_image_labels`, classes absent from `labels` are zeroed.
pub fn infer_cams<R: Real>(
    model: &Classifier<R>,
    image: ArrayView3<'_, R>,
    labels: Option<&LabelVector>,
    cfg: &InferenceConfig,
) -> Result<CamStack<R>> {
    cfg.validate()?;
    let variants = cfg.variants();
    let (_, h, w) = image.dim();
    let mut sum = Array3::<R>::zeros((model.num_classes(), h, w));
    for &(scale, flip) in &variants {
        sum.scaled_add(R::one(), &variant_cams(model, image, scale, flip)?);
    }
    let n = R::from_usize(variants.len()).expect("variant count");
    let cams = cam::normalize_cams(&CamStack::raw(sum.mapv(|v| v / n)))?;
    match labels {
        Some(y) if cfg.restrict_to_image_labels => cam::mask_by_labels(&cams, y),
        _ => Ok(cams),
    }
}

/// Infers CAMs for every item that has a ground-truth mask, turns them into
/// pseudo-labels and scores those against the masks.
pub fn evaluate_dataset(
    model: &Classifier<f32>,
    dataset: &DatasetDescriptor,
    inference: &InferenceConfig,
    pseudo: &PseudoLabelConfig,
    parallel: bool,
) -> Result<MIoUReport> {
    let items: Vec<_> = dataset.items().iter().filter(|i| i.mask.is_some()).collect();
    if items.is_empty() {
        return Err(Error::Contract(format!(
            "split `{}` has no ground-truth masks",
            dataset.split
        )));
    }
    let score = |item: &&crate::data::DatasetItem| -> Result<ConfusionMatrix> {
        let image = item.load_tensor()?;
        let gt = item.load_mask()?.expect("filtered on masks");
        let cams = infer_cams(model, image.view(), Some(&item.labels), inference)?;
        let pred = make_pseudo_labels(&cams, pseudo)?;
        let mut cm = ConfusionMatrix::new(dataset.num_classes());
        cm.accumulate(&item.id, pred.view(), gt.view())?;
        Ok(cm)
    };
    let partials: Vec<Result<ConfusionMatrix>> = if parallel {
        items.par_iter().map(score).collect()
    } else {
        items.iter().map(score).collect()
    };
    let mut total = ConfusionMatrix::new(dataset.num_classes());
    for p in partials {
        total.merge(&p?);
    }
    Ok(total.report())
}
