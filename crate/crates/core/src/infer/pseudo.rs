use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cam::CamStack;
use crate::data::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::Real;

/// Thresholding rule that turns normalized CAMs into a label map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    /// Pixels whose best class score is below this become background.
    pub threshold: f64,
    /// Scores in `[low, high)` are marked as ignore.
    pub ignore_band: Option<(f64, f64)>,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            ignore_band: None,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if let Some((lo, hi)) = self.ignore_band {
            if !(unit(lo) && unit(hi) && lo < hi) {
                return Err(Error::Config(format!(
                    "ignore band ({lo}, {hi}) must satisfy 0 < low < high < 1"
                )));
            }
        }
        Ok(())
    }
}

/// Per pixel: `0` if the best score is below the threshold, otherwise the
/// best class index plus one, or `255` inside the ignore band. Ties go to the
/// lowest class index.
pub fn make_pseudo_labels<R: Real>(cams: &CamStack<R>, cfg: &PseudoLabelConfig) -> Result<Array2<u8>> {
    cfg.validate()?;
    if !cams.is_normalized() {
        return Err(Error::Contract("pseudo-labels need normalized CAMs".into()));
    }
    let c = cams.num_classes();
    if c >= IGNORE_INDEX as usize {
        return Err(Error::Contract(format!("{c} classes do not fit in an 8-bit label map")));
    }
    let (h, w) = cams.spatial();
    let maps = cams.maps();
    let mut out = Array2::<u8>::zeros((h, w));
    for ((y, x), label) in out.indexed_iter_mut() {
        let pixel = maps.slice(ndarray::s![.., y, x]);
        let (mut best, mut score) = (0usize, f64::NEG_INFINITY);
        for (k, v) in pixel.iter().enumerate() {
            let v = v.as_f64();
            if v > score {
                best = k;
                score = v;
            }
        }
        *label = match cfg.ignore_band {
            Some((lo, hi)) if score >= lo && score < hi => IGNORE_INDEX,
            _ if score < cfg.threshold => 0,
            _ => best as u8 + 1,
        };
    }
    Ok(out)
}
