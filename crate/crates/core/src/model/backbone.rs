//! Feature extractors.

use std::any::Any;
use std::fmt;

use ndarray::{Array3, ArrayD, ArrayView3, ArrayViewD, ArrayViewMutD, Ix1, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvTrace};
use crate::error::{Error, Result};
use crate::Real;

/// Which feature extractor a model uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    /// Stack of 3×3 conv + ReLU stages. The first `log2(stride)` stages
    /// downsample by two, the rest keep resolution.
    TinyCnn { widths: Vec<usize>, stride: usize },
    /// 1×1 conv + ReLU layers only; output stride 1.
    PointwiseOnly { widths: Vec<usize> },
    /// A user-supplied [`Backbone`] implementation.
    External {
        name: String,
        channels: usize,
        stride: usize,
    },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::TinyCnn {
            widths: vec![16, 32, 64, 128],
            stride: 16,
        }
    }
}

impl BackboneSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BackboneSpec::TinyCnn { .. } => "tiny_cnn",
            BackboneSpec::PointwiseOnly { .. } => "pointwise_only",
            BackboneSpec::External { .. } => "external",
        }
    }

    /// Output stride `s`.
    pub fn stride(&self) -> usize {
        match self {
            BackboneSpec::TinyCnn { stride, .. } | BackboneSpec::External { stride, .. } => *stride,
            BackboneSpec::PointwiseOnly { .. } => 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackboneSpec::TinyCnn { widths, .. } | BackboneSpec::PointwiseOnly { widths } => {
                widths.last().copied().unwrap_or(0)
            }
            BackboneSpec::External { channels, .. } => *channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneSpec::TinyCnn { widths, stride } => {
                if ![4, 8, 16].contains(stride) {
                    return Err(Error::Config(format!(
                        "tiny_cnn stride must be 4, 8 or 16, got {stride}"
                    )));
                }
                let downsampling = stride.trailing_zeros() as usize;
                if widths.len() < downsampling {
                    return Err(Error::Config(format!(
                        "tiny_cnn stride {stride} needs at least {downsampling} stages, got {}",
                        widths.len()
                    )));
                }
                if widths.contains(&0) {
                    return Err(Error::Config("tiny_cnn widths must be positive".into()));
                }
            }
            BackboneSpec::PointwiseOnly { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Config("pointwise_only needs at least one positive width".into()));
                }
            }
            BackboneSpec::External { channels, stride, .. } => {
                if *channels == 0 || *stride == 0 {
                    return Err(Error::Config("external backbone needs channels and stride >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for BackboneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |w: &[usize]| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        match self {
            BackboneSpec::TinyCnn { widths, stride } => write!(f, "tiny_cnn(widths={}, stride={stride})", join(widths)),
            BackboneSpec::PointwiseOnly { widths } => write!(f, "pointwise_only(widths={})", join(widths)),
            BackboneSpec::External { name, channels, stride } => {
                write!(f, "external({name}, channels={channels}, stride={stride})")
            }
        }
    }
}

/// Opaque per-call state a backbone keeps between forward and backward.
pub type BackboneTrace = Box<dyn Any + Send>;

/// Feature extractor `F`: image `(3, H, W)` to features `(D, h, w)`.
///
/// Implementations own their parameters and compute their own gradients;
/// `grads` slots passed to [`Backbone::backward`] line up with
/// [`Backbone::params`].
pub trait Backbone<R: Real>: Send + Sync {
    fn spec(&self) -> BackboneSpec;

    fn forward(&self, image: ArrayView3<'_, R>) -> (Array3<R>, BackboneTrace);

    /// Accumulates parameter gradients given the gradient on the features.
    fn backward(&self, trace: BackboneTrace, grad_features: Array3<R>, grads: &mut [ArrayD<R>]);

    /// Named parameters in a fixed order.
    fn params(&self) -> Vec<(String, ArrayViewD<'_, R>)>;

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, R>>;

    /// Spatial size of the features for an `h × w` input.
    fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.spec().stride();
        (h.div_ceil(s), w.div_ceil(s))
    }
}

/// The built-in backbones: a plain stack of conv + ReLU layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack<R: Real> {
    spec: BackboneSpec,
    layers: Vec<Conv2d<R>>,
}

struct StackTrace<R: Real> {
    layers: Vec<(ConvTrace<R>, Array3<R>)>,
}

impl<R: Real> ConvStack<R> {
    pub fn new(spec: BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        let mut in_ch = 3;
        match &spec {
            BackboneSpec::TinyCnn { widths, stride } => {
                let downsampling = stride.trailing_zeros() as usize;
                for (i, &w) in widths.iter().enumerate() {
                    let s = if i < downsampling { 2 } else { 1 };
                    layers.push(Conv2d::init(in_ch, w, 3, s, 1, rng));
                    in_ch = w;
                }
            }
            BackboneSpec::PointwiseOnly { widths } => {
                for &w in widths {
                    layers.push(Conv2d::init(in_ch, w, 1, 1, 0, rng));
                    in_ch = w;
                }
            }
            BackboneSpec::External { .. } => {
                return Err(Error::Config(
                    "external backbones are supplied by the caller, not built from a spec".into(),
                ))
            }
        }
        Ok(Self { spec, layers })
    }
}

impl<R: Real> Backbone<R> for ConvStack<R> {
    fn spec(&self) -> BackboneSpec {
        self.spec.clone()
    }

    fn forward(&self, image: ArrayView3<'_, R>) -> (Array3<R>, BackboneTrace) {
        // Inputs arrive in [0, 1]; centre them.
        let two = R::lit(2.0);
        let mut x = image.mapv(|v| v * two - R::one());
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (mut out, t) = layer.forward(x.view());
            out.mapv_inplace(|v| v.max(R::zero()));
            x = out.clone();
            traces.push((t, out));
        }
        (x, Box::new(StackTrace { layers: traces }))
    }

    fn backward(&self, trace: BackboneTrace, grad_features: Array3<R>, grads: &mut [ArrayD<R>]) {
        let trace = trace
            .downcast::<StackTrace<R>>()
            .expect("trace produced by this backbone");
        let mut grad = grad_features;
        for (i, ((t, out), layer)) in trace.layers.into_iter().zip(&self.layers).enumerate().rev() {
            ndarray::Zip::from(&mut grad).and(&out).for_each(|g, &o| {
                if o <= R::zero() {
                    *g = R::zero();
                }
            });
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            let gw = gw[0].view_mut().into_dimensionality::<Ix2>().expect("weight grad");
            let gb = gb[0].view_mut().into_dimensionality::<Ix1>().expect("bias grad");
            match layer.backward(t, &grad, gw, gb, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }

    fn params(&self) -> Vec<(String, ArrayViewD<'_, R>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("backbone.{i}.weight"), l.weight.view().into_dyn()),
                    (format!("backbone.{i}.bias"), l.bias.view().into_dyn()),
                ]
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, R>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.view_mut().into_dyn(), l.bias.view_mut().into_dyn()])
            .collect()
    }
}
