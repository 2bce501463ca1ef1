//! Composite blocks (conv unit, residual block) and the parameter-tensor
//! visitor used by the optimizer, the checkpoint writer, and the
//! finite-difference checks.

use ndarray::Array3;

use crate::nn::{leaky_relu, leaky_relu_backward, ChannelAffine, Conv2d};
use crate::tensor::Scalar;

/// Visits every parameter tensor of a module in a fixed, documented order.
/// The order defines the checkpoint layout and the Adam state alignment.
pub trait ParamTensors<F: Scalar>: Sized {
    /// A same-shaped module with all parameters zeroed (gradient container).
    fn zeros_like(&self) -> Self;
    fn slices(&self) -> Vec<&[F]>;
    fn slices_mut(&mut self) -> Vec<&mut [F]>;

    fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// `dst += src`, elementwise over aligned parameter tensors.
pub fn accumulate<F: Scalar, P: ParamTensors<F>>(dst: &mut P, src: &P) {
    let srcs = src.slices();
    for (d, s) in dst.slices_mut().into_iter().zip(srcs) {
        for (dv, sv) in d.iter_mut().zip(s.iter()) {
            *dv = *dv + *sv;
        }
    }
}

/// `p *= k`, elementwise.
pub fn scale<F: Scalar, P: ParamTensors<F>>(p: &mut P, k: F) {
    for s in p.slices_mut() {
        for v in s.iter_mut() {
            *v = *v * k;
        }
    }
}

impl<F: Scalar> ParamTensors<F> for Conv2d<F> {
    fn zeros_like(&self) -> Self {
        let (o, i, kh, _) = self.weight.dim();
        Conv2d::zeros(o, i, kh, self.stride, self.padding)
    }

    fn slices(&self) -> Vec<&[F]> {
        vec![
            self.weight.as_slice().expect("owned weight is contiguous"),
            self.bias.as_slice().expect("owned bias is contiguous"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.weight.as_slice_mut().expect("owned weight is contiguous"),
            self.bias.as_slice_mut().expect("owned bias is contiguous"),
        ]
    }
}

impl<F: Scalar> ParamTensors<F> for ChannelAffine<F> {
    fn zeros_like(&self) -> Self {
        Self {
            gamma: ndarray::Array1::zeros(self.gamma.len()),
            beta: ndarray::Array1::zeros(self.beta.len()),
        }
    }

    fn slices(&self) -> Vec<&[F]> {
        vec![
            self.gamma.as_slice().expect("owned gamma is contiguous"),
            self.beta.as_slice().expect("owned beta is contiguous"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.gamma.as_slice_mut().expect("owned gamma is contiguous"),
            self.beta.as_slice_mut().expect("owned beta is contiguous"),
        ]
    }
}

/// Convolution followed by per-channel affine scaling. Activation is applied
/// by the caller so the pre-activation can be cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvUnit<F> {
    pub conv: Conv2d<F>,
    pub affine: ChannelAffine<F>,
}

pub struct ConvUnitCache<F> {
    /// Input to the convolution.
    x: Array3<F>,
    /// Convolution output (input to the affine).
    h: Array3<F>,
}

impl<F: Scalar> ConvUnit<F> {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            conv: Conv2d::zeros(out_ch, in_ch, kernel, stride, padding),
            affine: ChannelAffine::identity(out_ch),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        self.affine.forward(&self.conv.forward(x))
    }

    pub fn forward_cached(&self, x: &Array3<F>) -> (Array3<F>, ConvUnitCache<F>) {
        let h = self.conv.forward(x);
        let y = self.affine.forward(&h);
        (y, ConvUnitCache { x: x.clone(), h })
    }

    /// Accumulates parameter gradients into `grads`; returns the input
    /// gradient.
    pub fn backward(&self, cache: &ConvUnitCache<F>, gy: &Array3<F>, grads: &mut ConvUnit<F>) -> Array3<F> {
        let (gh, gg, gb) = self.affine.backward(&cache.h, gy);
        accumulate(&mut grads.affine, &ChannelAffine { gamma: gg, beta: gb });
        let (gx, gw, gbias) = self.conv.backward(&cache.x, &gh);
        for (d, s) in grads.conv.weight.iter_mut().zip(gw.iter()) {
            *d = *d + *s;
        }
        for (d, s) in grads.conv.bias.iter_mut().zip(gbias.iter()) {
            *d = *d + *s;
        }
        gx
    }
}

impl<F: Scalar> ParamTensors<F> for ConvUnit<F> {
    fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            affine: ParamTensors::zeros_like(&self.affine),
        }
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut v = self.conv.slices();
        v.extend(self.affine.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.conv.slices_mut();
        v.extend(self.affine.slices_mut());
        v
    }
}

/// Basic residual block. The entry convolution carries the stride; a 1x1
/// projection aligns the skip path whenever stride or channel count changes.
///
/// `y = lrelu(conv2(lrelu(conv1(x))) + skip(x))`
#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub conv1: ConvUnit<F>,
    pub conv2: ConvUnit<F>,
    pub skip: Option<ConvUnit<F>>,
}

pub struct ResBlockCache<F> {
    c1: ConvUnitCache<F>,
    /// conv1 output, pre-activation.
    a1: Array3<F>,
    c2: ConvUnitCache<F>,
    skip: Option<ConvUnitCache<F>>,
    /// main + skip, pre final activation.
    pre: Array3<F>,
}

impl<F: Scalar> ResBlock<F> {
    pub fn zeros(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let skip = if stride != 1 || in_ch != out_ch {
            Some(ConvUnit::zeros(out_ch, in_ch, 1, stride, 0))
        } else {
            None
        };
        Self {
            conv1: ConvUnit::zeros(out_ch, in_ch, 3, stride, 1),
            conv2: ConvUnit::zeros(out_ch, out_ch, 3, 1, 1),
            skip,
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let a1 = self.conv1.forward(x);
        let m = self.conv2.forward(&leaky_relu(&a1));
        let sk = match &self.skip {
            Some(s) => s.forward(x),
            None => x.clone(),
        };
        leaky_relu(&(m + sk))
    }

    pub fn forward_cached(&self, x: &Array3<F>) -> (Array3<F>, ResBlockCache<F>) {
        let (a1, c1) = self.conv1.forward_cached(x);
        let y1 = leaky_relu(&a1);
        let (m, c2) = self.conv2.forward_cached(&y1);
        let (sk, skip_cache) = match &self.skip {
            Some(s) => {
                let (sk, c) = s.forward_cached(x);
                (sk, Some(c))
            }
            None => (x.clone(), None),
        };
        let pre = m + sk;
        let y = leaky_relu(&pre);
        (y, ResBlockCache { c1, a1, c2, skip: skip_cache, pre })
    }

    pub fn backward(&self, cache: &ResBlockCache<F>, gy: &Array3<F>, grads: &mut ResBlock<F>) -> Array3<F> {
        let gpre = leaky_relu_backward(&cache.pre, gy);
        let gy1 = self.conv2.backward(&cache.c2, &gpre, &mut grads.conv2);
        let ga1 = leaky_relu_backward(&cache.a1, &gy1);
        let mut gx = self.conv1.backward(&cache.c1, &ga1, &mut grads.conv1);
        match (&self.skip, &cache.skip, &mut grads.skip) {
            (Some(s), Some(c), Some(gs)) => {
                let g_skip = s.backward(c, &gpre, gs);
                gx = gx + g_skip;
            }
            (None, None, None) => {
                gx = gx + gpre;
            }
            _ => unreachable!("skip presence must agree between params, cache, grads"),
        }
        gx
    }
}

impl<F: Scalar> ParamTensors<F> for ResBlock<F> {
    fn zeros_like(&self) -> Self {
        Self {
            conv1: ParamTensors::zeros_like(&self.conv1),
            conv2: ParamTensors::zeros_like(&self.conv2),
            skip: self.skip.as_ref().map(ParamTensors::zeros_like),
        }
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut v = self.conv1.slices();
        v.extend(self.conv2.slices());
        if let Some(s) = &self.skip {
            v.extend(s.slices());
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.conv1.slices_mut();
        v.extend(self.conv2.slices_mut());
        if let Some(s) = &mut self.skip {
            v.extend(s.slices_mut());
        }
        v
    }
}
