//! Puzzle-style class activation maps for weakly-supervised semantic
//! segmentation.
//!
//! A classifier trained from image-level labels produces class activation
//! maps (CAMs). This crate trains such a classifier with an extra
//! consistency signal: the image is cut into four quadrants, the same network
//! produces CAMs for each quadrant, the quadrant CAMs are stitched back
//! together, and an L1 term pulls the stitched maps towards the full-image
//! maps. The pieces:
//!
//! - [`cam`]: CAM computation, normalization, pooling and label masking.
//! - [`puzzle`]: quadrant tiling and merging.
//! - [`losses`]: soft-margin classification, reconstruction, the α ramp.
//! - [`model`]: backbone + 1×1 head with single and puzzle forward paths.
//! - [`data`]: dataset layout, augmentation, synthetic shapes.
//! - [`train`]: the training loop and the loss ablation harness.
//! - [`infer`]: multi-scale inference, pseudo-labels, mIoU, CAM files.
//!
//! The guide in `book/` walks through each of these; its code listings are
//! compiled and run as doctests of this crate.

pub mod cam;
pub mod data;
pub mod error;
pub mod infer;
pub mod losses;
pub mod model;
pub mod ops;
pub mod puzzle;
mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

pub use cam::{CamStack, ClassifierWeights, FeatureMap, LabelVector};
pub use losses::{AlphaSchedule, LossBreakdown, LossToggles};
pub use model::{BackboneSpec, Classifier, ForwardResult};
pub use puzzle::PuzzleTiles;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/cams.md")]
    mod cams {}
    #[doc = include_str!("../../../book/src/puzzle.md")]
    mod puzzle {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
