//! Generalized normality learning: reverse-distillation anomaly detection
//! hardened against distribution shift.
//!
//! The crate trains a student decoder to reconstruct a frozen teacher's
//! multi-scale features from a one-class bottleneck, with agreement losses
//! over augmented copies of each normal sample, and scores test images by
//! teacher/student disagreement. At inference, feature-distribution matching
//! against a random training sample pulls shifted inputs back toward the
//! training distribution.

pub mod augment;
pub mod corruption;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fdm;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{GnlError, Result};
pub use tensor::{FeatureMap, FeaturePyramid, ImageTensor, ReconPyramid, Scalar};
