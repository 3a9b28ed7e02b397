//! Domain-knowledge building blocks for universal lesion detection on CT.
//!
//! The crate covers the parts of a lesion-detection pipeline that carry
//! CT-specific knowledge, without the detector backbone itself:
//!
//! 1. [`annotations`] – DeepLesion-style lesion records: CSV schema, official
//!    splits, size buckets.
//! 2. [`windowing`] – Hounsfield-unit windows and the five-window
//!    multi-intensity input stack.
//! 3. [`preprocess`] – black-border cropping, trilinear resampling, RECIST
//!    pseudo masks, affine augmentation.
//! 4. [`anchors`] – anchor shapes, dense/pyramid anchor generation, IoU and a
//!    differential-evolution search for lesion-specific anchors.
//! 5. [`fusion`] – convolution-augmented multi-head self-attention fusion of
//!    per-window feature maps, with an analytic backward pass.
//! 6. [`eval`] – greedy IoU matching, sensitivity at fixed false positives per
//!    image, stratified reports.
//! 7. [`synthgen`] – synthetic CT phantoms with planted lesions.
//! 8. [`cli`] – the `lesionkit` command line.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what the CLI and file formats use.

pub mod annotations;
pub mod anchors;
pub mod cli;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod preprocess;
pub mod scalar;
pub mod synthgen;
pub mod windowing;

pub use scalar::Scalar;

/// Axis-aligned box in `f64` pixel coordinates.
pub type Box = anchors::Box<f64>;
/// Hounsfield window with `f64` level/width.
pub type HuWindow = windowing::HuWindow<f64>;
/// Ordered list of `f64` windows.
pub type WindowSet = windowing::WindowSet<f64>;
/// CT volume with `f64` voxels.
pub type Volume = preprocess::Volume<f64>;
/// Feature block of `f64` views.
pub type FeatureBlock = fusion::FeatureBlock<f64>;
/// Attention branch parameters in `f64`.
pub type AttentionParams = fusion::AttentionParams<f64>;
/// Convolution branch parameters in `f64`.
pub type ConvParams = fusion::ConvParams<f64>;
/// Both fusion branches in `f64`.
pub type FusionParams = fusion::FusionParams<f64>;
