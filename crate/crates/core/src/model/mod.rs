//! The CAM classifier: a feature extractor followed by a bias-free 1×1
//! classifier head, with a single-image path and a puzzle path that share one
//! parameter set.

mod backbone;
mod checkpoint;
mod conv;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3, ArrayViewD, ArrayViewMutD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use backbone::{Backbone, BackboneSpec, BackboneTrace, ConvStack};
pub use checkpoint::CHECKPOINT_MAGIC;
pub use conv::Conv2d;

use crate::cam::{self, CamStack, ClassifierWeights, FeatureMap};
use crate::error::{Error, Result};
use crate::puzzle::{self, PuzzleTiles};
use crate::Real;

/// Output of one forward pass over a full image.
#[derive(Debug, Clone)]
pub struct ForwardResult<R: Real = f32> {
    pub features: FeatureMap<R>,
    pub raw_cams: CamStack<R>,
    /// `gap(raw_cams)`.
    pub logits: Array1<R>,
}

/// State kept from [`Classifier::forward_single_traced`] for backward.
pub struct SingleTrace<R: Real> {
    backbone: BackboneTrace,
    features: Array3<R>,
}

/// State kept from [`Classifier::forward_puzzle_traced`] for backward.
pub struct PuzzleTrace<R: Real> {
    tiles: Vec<SingleTrace<R>>,
}

/// Parameter gradients, aligned with [`Classifier::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R: Real> {
    pub tensors: Vec<ArrayD<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn add_assign(&mut self, other: &Gradients<R>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.scaled_add(R::one(), b);
        }
    }

    pub fn scale(&mut self, k: R) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * k);
        }
    }
}

/// Per-channel input statistics (the usual ImageNet values). Images enter the
/// model as RGB in `[0, 1]` and are standardized before the backbone, so
/// puzzle padding and convolution padding both sit at the mean colour.
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn standardize<R: Real>(image: ArrayView3<'_, R>) -> Array3<R> {
    let mut out = image.to_owned();
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (R::lit(INPUT_MEAN[c]), R::lit(INPUT_STD[c]));
        plane.mapv_inplace(|v| (v - m) / s);
    }
    out
}

/// Feature extractor `F` plus classifier weights `θ` (`C × D`, no bias).
pub struct Classifier<R: Real = f32> {
    backbone: Box<dyn Backbone<R>>,
    head: Array2<R>,
}

impl<R: Real> std::fmt::Debug for Classifier<R> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier")
            .field("backbone", &self.backbone.spec())
            .field("num_classes", &self.num_classes())
            .finish()
    }
}

impl<R: Real> Classifier<R> {
    /// Builds one of the built-in backbones with seeded initialization.
    pub fn new(spec: BackboneSpec, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = ConvStack::new(spec, &mut rng)?;
        Self::build(Box::new(backbone), num_classes, &mut rng)
    }

    /// Wraps a caller-provided backbone.
    pub fn with_backbone(backbone: Box<dyn Backbone<R>>, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(backbone, num_classes, &mut rng)
    }

    fn build(backbone: Box<dyn Backbone<R>>, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("a classifier needs at least one class".into()));
        }
        let d = backbone.spec().out_channels();
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let head = Array2::from_shape_simple_fn((num_classes, d), || R::lit(normal.sample(rng)));
        Ok(Self { backbone, head })
    }

    pub fn spec(&self) -> BackboneSpec {
        self.backbone.spec()
    }

    pub fn num_classes(&self) -> usize {
        self.head.nrows()
    }

    pub fn stride(&self) -> usize {
        self.backbone.spec().stride()
    }

    pub fn head(&self) -> &Array2<R> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Array2<R> {
        &mut self.head
    }

    /// Named parameters: backbone first, then `head.weight`.
    pub fn parameters(&self) -> Vec<(String, ArrayViewD<'_, R>)> {
        let mut p = self.backbone.params();
        p.push(("head.weight".to_string(), self.head.view().into_dyn()));
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<ArrayViewMutD<'_, R>> {
        let mut p = self.backbone.params_mut();
        p.push(self.head.view_mut().into_dyn());
        p
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients<R> {
        Gradients {
            tensors: self
                .parameters()
                .iter()
                .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    fn check_input(&self, image: &ArrayView3<'_, R>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Contract(format!("expected a 3-channel image, got {c} channels")));
        }
        let s = self.stride();
        if h < 2 * s || w < 2 * s {
            return Err(Error::Contract(format!(
                "image {w}x{h} is smaller than twice the output stride ({s})"
            )));
        }
        Ok(())
    }

    fn classifier_weights(&self) -> Result<ClassifierWeights<R>> {
        ClassifierWeights::new(self.head.clone())
    }

    fn run(&self, image: ArrayView3<'_, R>) -> Result<(ForwardResult<R>, SingleTrace<R>)> {
        let (_, h, w) = image.dim();
        let (features, trace) = self.backbone.forward(image);
        let fmap = FeatureMap::new(features.clone(), (w, h))?;
        let raw_cams = cam::compute_cams(&fmap, &self.classifier_weights()?)?;
        let logits = cam::gap(&raw_cams);
        Ok((
            ForwardResult {
                features: fmap,
                raw_cams,
                logits,
            },
            SingleTrace {
                backbone: trace,
                features,
            },
        ))
    }

    /// `f = F(I)`, raw CAMs and their pooled logits.
    pub fn forward_single(&self, image: ArrayView3<'_, R>) -> Result<ForwardResult<R>> {
        self.forward_single_traced(image).map(|(r, _)| r)
    }

    pub fn forward_single_traced(&self, image: ArrayView3<'_, R>) -> Result<(ForwardResult<R>, SingleTrace<R>)> {
        self.check_input(&image)?;
        self.run(standardize(image).view())
    }

    /// Runs the same network on the four quadrants of `image` and merges the
    /// raw tile CAMs back to full feature resolution. Returns the merged stack
    /// and its pooled logits.
    pub fn forward_puzzle(&self, image: ArrayView3<'_, R>) -> Result<(CamStack<R>, Array1<R>)> {
        self.forward_puzzle_traced(image).map(|(c, l, _)| (c, l))
    }

    pub fn forward_puzzle_traced(&self, image: ArrayView3<'_, R>) -> Result<(CamStack<R>, Array1<R>, PuzzleTrace<R>)> {
        self.check_input(&image)?;
        let (_, h, w) = image.dim();
        let tiles = puzzle::tile(standardize(image).view())?;
        let mut cams = Vec::with_capacity(4);
        let mut traces = Vec::with_capacity(4);
        for t in tiles.tiles() {
            let (res, trace) = self.run(t.view())?;
            cams.push(res.raw_cams.into_maps());
            traces.push(trace);
        }
        let cams: [Array3<R>; 4] = cams.try_into().expect("four tiles");
        let (fh, fw) = self.backbone.feature_size(h, w);
        let merged = puzzle::merge(&PuzzleTiles::from_tiles(cams)?, (fw, fh))?;
        let merged = CamStack::raw(merged);
        let logits = cam::gap(&merged);
        Ok((merged, logits, PuzzleTrace { tiles: traces }))
    }

    /// Accumulates gradients given `d loss / d raw_cams` of a single-image pass.
    pub fn backward_single(&self, trace: SingleTrace<R>, grad_raw_cams: &Array3<R>, grads: &mut Gradients<R>) {
        let (c, h, w) = grad_raw_cams.dim();
        let d = trace.features.dim().0;
        let g = grad_raw_cams
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("cam grad shape");
        let f = trace
            .features
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((d, h * w))
            .expect("feature shape");
        let last = grads.tensors.len() - 1;
        let (bb, head) = grads.tensors.split_at_mut(last);
        let mut gh = head[0]
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("head grad");
        ndarray::linalg::general_mat_mul(R::one(), &g, &f.t(), R::one(), &mut gh);
        let grad_features = self
            .head
            .t()
            .dot(&g)
            .into_shape_with_order((d, h, w))
            .expect("feature grad shape");
        self.backbone.backward(trace.backbone, grad_features, bb);
    }

    /// Accumulates gradients given `d loss / d merged_raw_cams` of a puzzle pass.
    pub fn backward_puzzle(&self, trace: PuzzleTrace<R>, grad_merged: &Array3<R>, grads: &mut Gradients<R>) {
        // Gradient of a crop is zero-padding; splitting it is the adjoint of merge.
        let grad_tiles = puzzle::tile(grad_merged.view()).expect("merged grad is at least 2x2");
        for (t, g) in trace.tiles.into_iter().zip(grad_tiles.tiles()) {
            let (_, th, tw) = g.dim();
            let (_, fh, fw) = t.features.dim();
            // Tiles are cut from a zero-padded grid, so their CAMs match the tile grid exactly.
            debug_assert_eq!((th, tw), (fh, fw));
            self.backward_single(t, g, grads);
        }
    }
}
