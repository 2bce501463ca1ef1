//! Core tensor types: images, feature maps, and feature pyramids.
//!
//! All arrays are channel-first `(C, H, W)` with no batch dimension; batching
//! is a loop over samples so single-image and batched paths agree bitwise.

use ndarray::{Array3, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{GnlError, Result};

/// Float element trait for the numeric core. Implemented for `f32` (the
/// production dtype, matching the checkpoint format) and `f64` (used by the
/// finite-difference gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A single feature map of shape `(C_k, H_k, W_k)`.
pub type FeatureMap<F> = Array3<F>;

/// An image in `[0, 1]`, shape `(C, H, W)`. The unit of all data flow.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<F = f32> {
    data: Array3<F>,
}

impl<F: Scalar> ImageTensor<F> {
    /// Validates the image contract: finite values in `[0, 1]`, one or three
    /// channels, and spatial dims divisible by 16 (stem stride 4 followed by
    /// two stride-2 blocks must produce integer shapes).
    pub fn new(data: Array3<F>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(GnlError::Shape(format!("image must have 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(GnlError::Shape(format!(
                "image spatial dims must be nonzero and divisible by 16, got {h}x{w}"
            )));
        }
        let zero = F::zero();
        let one = F::one();
        for &v in data.iter() {
            if !v.is_finite() || v < zero || v > one {
                return Err(GnlError::Numeric(format!("image value {v} outside [0, 1]")));
            }
        }
        Ok(Self { data })
    }

    /// Wraps data that is known to satisfy the image contract (e.g. the
    /// output of a clamping operation on an already-valid image).
    pub(crate) fn from_valid(data: Array3<F>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite() && *v >= F::zero() && *v <= F::one()));
        Self { data }
    }

    pub fn data(&self) -> &Array3<F> {
        &self.data
    }

    pub fn into_data(self) -> Array3<F> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }
}

impl ImageTensor<f32> {
    /// Widens to `f64`, for the double-precision gradient checks.
    pub fn to_f64(&self) -> ImageTensor<f64> {
        ImageTensor { data: self.data.mapv(f64::from) }
    }
}

/// The teacher's multi-scale features plus the bottleneck embedding.
/// `p1` is the lowest-level (highest-resolution) map; `bn` shares `p3`'s
/// spatial size.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<F = f32> {
    pub p1: FeatureMap<F>,
    pub p2: FeatureMap<F>,
    pub p3: FeatureMap<F>,
    pub bn: FeatureMap<F>,
}

/// The decoder's reconstructions, shape-matched to the teacher pyramid.
/// `l1` is the final decoder block's output (lowest level, highest
/// resolution).
#[derive(Debug, Clone)]
pub struct ReconPyramid<F = f32> {
    pub l1: FeatureMap<F>,
    pub l2: FeatureMap<F>,
    pub l3: FeatureMap<F>,
}

pub(crate) fn check_same_shape<F: Scalar>(
    what: &str,
    a: &FeatureMap<F>,
    b: &FeatureMap<F>,
) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(GnlError::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}
