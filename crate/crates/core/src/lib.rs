//! Semantic distribution-aware contrastive adaptation for segmentation.
//!
//! The crate bundles the numerical pieces of the method and a desk-scale
//! harness that exercises them end to end:
//!
//! - [`numeric`]: small dense linear algebra, stable softmax, Gaussian sampling
//! - [`bank`]: streaming per-class mean/covariance statistics
//! - [`contrastive`]: the closed-form contrastive bound and its sampled checks
//! - [`seg_loss`]: cross-entropy and Lovász-Softmax with logit gradients
//! - [`pseudo`]: confidence masks and median-threshold pseudo labels
//! - [`synth`]: synthetic source/target scene generator
//! - [`model`]: a tiny per-pixel segmenter with manual backprop and SGD
//! - [`train`]: warm-up, adaptation and self-training loops
//! - [`metrics`]: IoU, mIoU and pixel-wise discrimination distance
//! - [`experiment`]: configs, runs, sweeps and the certification suite

pub mod bank;
pub mod certify;
pub mod contrastive;
pub mod error;
pub mod experiment;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod pseudo;
pub mod seg_loss;
pub mod synth;
pub mod train;

pub use error::{Result, SdcaError};
