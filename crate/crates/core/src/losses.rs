//! Training objective: multi-label soft-margin classification on pooled CAMs,
//! the L1 reconstruction term between full-image and merged-tile CAMs, the α
//! ramp, and their weighted sum.
//!
//! Every loss here is a batch-size independent mean, and every gradient is
//! returned alongside its value so the training loop never differentiates
//! numerically.

use ndarray::{Array1, Array3, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::cam::{self, CamStack, LabelVector};
use crate::error::{Error, Result};
use crate::Real;

/// Floor inside `-log(Ŷ_t + floor)`.
pub const LOG_FLOOR: f64 = 1e-12;

fn sigmoid<R: Real>(z: R) -> R {
    R::one() / (R::one() + (-z).exp())
}

fn check_len(logits: usize, y: &LabelVector) -> Result<()> {
    if logits != y.len() {
        return Err(Error::shape("labels vs logits", format!("C = {logits}"), y.len()));
    }
    Ok(())
}

/// Mean over classes of `-log(Ŷ_t)`, where `Ŷ = σ(logits)` and `Ŷ_t` is `Ŷ`
/// for present classes and `1 - Ŷ` for absent ones.
pub fn soft_margin_cls_loss<R: Real>(logits: ArrayView1<'_, R>, y: &LabelVector) -> Result<R> {
    soft_margin_cls_loss_grad(logits, y).map(|(l, _)| l)
}

/// [`soft_margin_cls_loss`] together with its gradient w.r.t. the logits.
pub fn soft_margin_cls_loss_grad<R: Real>(logits: ArrayView1<'_, R>, y: &LabelVector) -> Result<(R, Array1<R>)> {
    check_len(logits.len(), y)?;
    let floor = R::lit(LOG_FLOOR);
    let n = R::from_usize(logits.len().max(1)).unwrap();
    let mut loss = R::zero();
    let mut grad = Array1::zeros(logits.len());
    for (k, (&z, g)) in logits.iter().zip(grad.iter_mut()).enumerate() {
        // 1 - σ(z) is evaluated as σ(-z) so saturated logits keep precision.
        let (t, sign) = if y.is_present(k) {
            (z, R::one())
        } else {
            (-z, -R::one())
        };
        let s = sigmoid(t);
        let one_minus = sigmoid(-t);
        loss = loss - (s + floor).ln();
        *g = -sign * s * one_minus / (s + floor) / n;
    }
    Ok((loss / n, grad))
}

/// Batch mean of [`soft_margin_cls_loss`]; row `b` of `logits` pairs with `ys[b]`.
pub fn soft_margin_cls_loss_batch<R: Real>(logits: ArrayView2<'_, R>, ys: &[LabelVector]) -> Result<R> {
    if logits.nrows() != ys.len() {
        return Err(Error::shape("batch size", logits.nrows(), ys.len()));
    }
    if ys.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = R::zero();
    for (row, y) in logits.outer_iter().zip(ys) {
        total = total + soft_margin_cls_loss(row, y)?;
    }
    Ok(total / R::from_usize(ys.len()).unwrap())
}

fn check_recon_inputs<R: Real>(a_s: &CamStack<R>, a_re: &CamStack<R>, y: &LabelVector) -> Result<()> {
    if a_s.maps().dim() != a_re.maps().dim() {
        return Err(Error::shape(
            "reconstruction stacks",
            format!("{:?}", a_s.maps().dim()),
            format!("{:?}", a_re.maps().dim()),
        ));
    }
    if !a_s.is_normalized() || !a_re.is_normalized() {
        return Err(Error::Contract("reconstruction loss expects normalized stacks".into()));
    }
    if y.len() != a_s.num_classes() {
        return Err(Error::shape("label vector length", a_s.num_classes(), y.len()));
    }
    Ok(())
}

/// Mean absolute difference between the label-masked stacks, averaged over
/// the full `C × h × w` extent.
pub fn reconstruction_loss<R: Real>(a_s: &CamStack<R>, a_re: &CamStack<R>, y: &LabelVector) -> Result<R> {
    reconstruction_loss_grad(a_s, a_re, y).map(|(l, _, _)| l)
}

/// [`reconstruction_loss`] plus its (sub)gradients w.r.t. `a_s` and `a_re`.
pub fn reconstruction_loss_grad<R: Real>(
    a_s: &CamStack<R>,
    a_re: &CamStack<R>,
    y: &LabelVector,
) -> Result<(R, Array3<R>, Array3<R>)> {
    check_recon_inputs(a_s, a_re, y)?;
    let dim = a_s.maps().dim();
    let n = R::from_usize(dim.0 * dim.1 * dim.2).unwrap();
    let mut grad_s = Array3::zeros(dim);
    let mut loss = R::zero();
    for (k, ((s, r), mut g)) in a_s
        .maps()
        .outer_iter()
        .zip(a_re.maps().outer_iter())
        .zip(grad_s.outer_iter_mut())
        .enumerate()
    {
        if !y.is_present(k) {
            continue;
        }
        Zip::from(&mut g).and(&s).and(&r).for_each(|g, &a, &b| {
            let d = a - b;
            loss = loss + d.abs();
            *g = if d > R::zero() {
                R::one() / n
            } else if d < R::zero() {
                -R::one() / n
            } else {
                R::zero()
            };
        });
    }
    let grad_re = grad_s.mapv(|v| -v);
    Ok((loss / n, grad_s, grad_re))
}

/// Linear ramp of the reconstruction weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_max: f64,
    /// Fraction of all optimizer steps after which `alpha_max` is reached.
    pub ramp_end_fraction: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            alpha_max: 4.0,
            ramp_end_fraction: 0.5,
        }
    }
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max >= 0.0 && self.alpha_max.is_finite()) {
            return Err(Error::Config(format!("alpha_max must be >= 0, got {}", self.alpha_max)));
        }
        if !(self.ramp_end_fraction > 0.0 && self.ramp_end_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "ramp_end_fraction must lie in (0, 1], got {}",
                self.ramp_end_fraction
            )));
        }
        Ok(())
    }
}

/// `alpha_max · min(1, step / (ramp_end_fraction · total_steps))`.
pub fn alpha_at(step: usize, total_steps: usize, sched: &AlphaSchedule) -> f64 {
    let ramp = sched.ramp_end_fraction * total_steps.max(1) as f64;
    sched.alpha_max * (step as f64 / ramp).min(1.0)
}

/// The loss terms of one step (or one batch mean).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub p_cls: f64,
    pub re: f64,
    pub alpha: f64,
    pub total: f64,
}

/// `cls + p_cls + alpha · re`.
pub fn total_loss(cls: f64, p_cls: f64, re: f64, alpha: f64) -> Result<LossBreakdown> {
    for (name, v) in [("cls", cls), ("p_cls", p_cls), ("re", re), ("alpha", alpha)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
        if v < 0.0 {
            return Err(Error::Contract(format!("{name} must be >= 0, got {v}")));
        }
    }
    Ok(LossBreakdown {
        cls,
        p_cls,
        re,
        alpha,
        total: cls + p_cls + alpha * re,
    })
}

/// Which optional terms participate in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub enable_p_cls: bool,
    pub enable_re: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            enable_p_cls: true,
            enable_re: true,
        }
    }
}

impl LossToggles {
    /// Whether the tiled branch has to be run at all.
    pub fn needs_puzzle(&self) -> bool {
        self.enable_p_cls || self.enable_re
    }
}

/// Loss value and gradients w.r.t. both raw CAM stacks.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput<R: Real> {
    pub breakdown: LossBreakdown,
    pub grad_single: Array3<R>,
    /// `None` when the tiled branch does not contribute.
    pub grad_merged: Option<Array3<R>>,
}

/// Full objective for one image, starting from raw CAMs.
///
/// Classification terms pool the raw maps; the reconstruction term compares
/// normalized, label-masked maps. Disabled terms report zero and contribute
/// no gradient.
pub fn puzzle_objective<R: Real>(
    single_raw: &CamStack<R>,
    merged_raw: Option<&CamStack<R>>,
    y: &LabelVector,
    toggles: LossToggles,
    alpha: f64,
) -> Result<ObjectiveOutput<R>> {
    let (h, w) = single_raw.spatial();
    let logits = cam::gap(single_raw);
    let (cls, d_logits) = soft_margin_cls_loss_grad(logits.view(), y)?;
    let mut grad_single = cam::gap_backward(d_logits.view(), h, w);

    let mut p_cls = R::zero();
    let mut re = R::zero();
    let mut grad_merged = None;
    if toggles.needs_puzzle() {
        let merged =
            merged_raw.ok_or_else(|| Error::Contract("tiled-branch CAMs required by the enabled loss terms".into()))?;
        if merged.maps().dim() != single_raw.maps().dim() {
            return Err(Error::shape(
                "merged CAM stack",
                format!("{:?}", single_raw.maps().dim()),
                format!("{:?}", merged.maps().dim()),
            ));
        }
        let mut g_merged = Array3::<R>::zeros(merged.maps().dim());
        if toggles.enable_p_cls {
            let (loss, d) = soft_margin_cls_loss_grad(cam::gap(merged).view(), y)?;
            p_cls = loss;
            g_merged = g_merged + cam::gap_backward(d.view(), h, w);
        }
        if toggles.enable_re {
            let ns = cam::normalize_cams(single_raw)?;
            let nr = cam::normalize_cams(merged)?;
            let (loss, gs, gr) = reconstruction_loss_grad(&ns, &nr, y)?;
            re = loss;
            let a = R::lit(alpha);
            grad_single = grad_single + cam::normalize_cams_backward(single_raw.maps(), &gs) * a;
            g_merged = g_merged + cam::normalize_cams_backward(merged.maps(), &gr) * a;
        }
        grad_merged = Some(g_merged);
    }
    let breakdown = total_loss(cls.as_f64(), p_cls.as_f64(), re.as_f64(), alpha)?;
    Ok(ObjectiveOutput {
        breakdown,
        grad_single,
        grad_merged,
    })
}
