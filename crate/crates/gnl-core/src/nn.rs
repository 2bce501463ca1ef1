//! Convolutional building blocks with hand-derived backward passes.
//!
//! Everything here is a pure function of (input, parameters): no batch
//! statistics, no internal randomness, no threading. Gradients are exact
//! analytic derivatives and are cross-checked against central finite
//! differences in the tests below and in the acceptance suite.

use ndarray::{Array1, Array3, Array4};

use crate::tensor::Scalar;

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// 2-D convolution over `(C, H, W)` maps with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `(out_channels, in_channels, kh, kw)`
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub stride: usize,
    pub padding: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Array4::zeros((out_ch, in_ch, kernel, kernel)),
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    fn padded(&self, x: &Array3<F>) -> Array3<F> {
        let p = self.padding;
        if p == 0 {
            return x.clone();
        }
        let (c, h, w) = x.dim();
        let mut xp = Array3::zeros((c, h + 2 * p, w + 2 * p));
        xp.slice_mut(ndarray::s![.., p..p + h, p..p + w]).assign(x);
        xp
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        assert!(hp >= kh && wp >= kw, "input smaller than kernel");
        ((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1)
    }

    /// Unrolls padded input patches into a `(ci * kh * kw, ho * wo)` matrix
    /// so the convolution becomes one matrix product.
    fn im2col(&self, xp: &Array3<F>, ho: usize, wo: usize) -> ndarray::Array2<F> {
        let (ci, _, _) = xp.dim();
        let (_, _, kh, kw) = self.weight.dim();
        let s = self.stride;
        let mut cols = ndarray::Array2::zeros((ci * kh * kw, ho * wo));
        for c in 0..ci {
            for u in 0..kh {
                for v in 0..kw {
                    let row = (c * kh + u) * kw + v;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            cols[[row, oy * wo + ox]] = xp[[c, oy * s + u, ox * s + v]];
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (co, ci, kh, kw) = self.weight.dim();
        let (xc, h, w) = x.dim();
        assert_eq!(xc, ci, "conv input channels {xc} != weight {ci}");
        let xp = self.padded(x);
        let (ho, wo) = self.out_spatial(h, w);
        let cols = self.im2col(&xp, ho, wo);
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .expect("weight is contiguous");
        let mut y = wmat.dot(&cols);
        for o in 0..co {
            let b = self.bias[o];
            for v in y.row_mut(o).iter_mut() {
                *v = *v + b;
            }
        }
        y.into_shape_with_order((co, ho, wo)).expect("conv output reshape")
    }

    /// Returns `(grad_input, grad_weight, grad_bias)` for upstream gradient
    /// `gy` at the output of `forward(x)`.
    pub fn backward(&self, x: &Array3<F>, gy: &Array3<F>) -> (Array3<F>, Array4<F>, Array1<F>) {
        let (co, ci, kh, kw) = self.weight.dim();
        let (_, h, w) = x.dim();
        let xp = self.padded(x);
        let (ho, wo) = self.out_spatial(h, w);
        assert_eq!(gy.dim(), (co, ho, wo), "conv backward: gy shape mismatch");
        let s = self.stride;
        let p = self.padding;

        let cols = self.im2col(&xp, ho, wo);
        let gy_mat = gy.view().into_shape_with_order((co, ho * wo)).expect("gy is contiguous");

        let gw = gy_mat
            .dot(&cols.t())
            .into_shape_with_order((co, ci, kh, kw))
            .expect("grad weight reshape");
        let mut gb = Array1::zeros(co);
        for o in 0..co {
            gb[o] = gy_mat.row(o).sum();
        }

        // col2im: scatter W^T gy back onto the padded input.
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .expect("weight is contiguous");
        let gcols = wmat.t().dot(&gy_mat);
        let mut gxp: Array3<F> = Array3::zeros(xp.dim());
        for c in 0..ci {
            for u in 0..kh {
                for v in 0..kw {
                    let row = (c * kh + u) * kw + v;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let iy = oy * s + u;
                            let ix = ox * s + v;
                            gxp[[c, iy, ix]] = gxp[[c, iy, ix]] + gcols[[row, oy * wo + ox]];
                        }
                    }
                }
            }
        }
        let gx = if p == 0 {
            gxp
        } else {
            gxp.slice(ndarray::s![.., p..p + h, p..p + w]).to_owned()
        };
        (gx, gw, gb)
    }
}

/// Per-channel affine scaling `y = gamma[c] * x + beta[c]`. This is the only
/// normalization-like layer in the model; it uses no batch statistics, so
/// single-image and batched inference agree exactly.
#[derive(Debug, Clone)]
pub struct ChannelAffine<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

impl<F: Scalar> ChannelAffine<F> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array3<F>) -> Array3<F> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "affine channel mismatch");
        let mut y = Array3::zeros((c, h, w));
        for ch in 0..c {
            let g = self.gamma[ch];
            let b = self.beta[ch];
            for i in 0..h {
                for j in 0..w {
                    y[[ch, i, j]] = g * x[[ch, i, j]] + b;
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Array3<F>, gy: &Array3<F>) -> (Array3<F>, Array1<F>, Array1<F>) {
        let (c, h, w) = x.dim();
        let mut gx = Array3::zeros((c, h, w));
        let mut gg = Array1::zeros(c);
        let mut gb = Array1::zeros(c);
        for ch in 0..c {
            let g = self.gamma[ch];
            for i in 0..h {
                for j in 0..w {
                    let gy_v = gy[[ch, i, j]];
                    gx[[ch, i, j]] = g * gy_v;
                    gg[ch] = gg[ch] + gy_v * x[[ch, i, j]];
                    gb[ch] = gb[ch] + gy_v;
                }
            }
        }
        (gx, gg, gb)
    }
}

/// Leaky rectifier with slope [`LEAKY_SLOPE`] on the negative side.
pub fn leaky_relu<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let slope = F::from_f64_lossy(LEAKY_SLOPE);
    x.mapv(|v| if v >= F::zero() { v } else { v * slope })
}

/// Backward of [`leaky_relu`] given the pre-activation input `x`.
pub fn leaky_relu_backward<F: Scalar>(x: &Array3<F>, gy: &Array3<F>) -> Array3<F> {
    let slope = F::from_f64_lossy(LEAKY_SLOPE);
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v < F::zero() {
            *g = *g * slope;
        }
    });
    gx
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample_nearest2<F: Scalar>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, 2 * h, 2 * w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = x[[ch, i, j]];
                y[[ch, 2 * i, 2 * j]] = v;
                y[[ch, 2 * i, 2 * j + 1]] = v;
                y[[ch, 2 * i + 1, 2 * j]] = v;
                y[[ch, 2 * i + 1, 2 * j + 1]] = v;
            }
        }
    }
    y
}

/// Backward of [`upsample_nearest2`]: each source cell sums its 2x2 fanout.
pub fn upsample_nearest2_backward<F: Scalar>(gy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = gy.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "upsample backward needs even dims");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                gx[[ch, i, j]] = gy[[ch, 2 * i, 2 * j]]
                    + gy[[ch, 2 * i, 2 * j + 1]]
                    + gy[[ch, 2 * i + 1, 2 * j]]
                    + gy[[ch, 2 * i + 1, 2 * j + 1]];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_shapes() {
        let conv = Conv2d::<f64>::zeros(8, 3, 3, 2, 1);
        assert_eq!(conv.out_spatial(16, 32), (8, 16));
        let stem = Conv2d::<f64>::zeros(8, 3, 4, 4, 0);
        assert_eq!(stem.out_spatial(32, 32), (8, 8));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv2d::<f64>::zeros(3, 2, 3, 2, 1);
        conv.weight = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-0.5..0.5));
        conv.bias = Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5));
        let x = rand_array3(&mut rng, 2, 6, 6);
        // Scalar objective: weighted sum of outputs so every grad is exercised.
        let wsum = rand_array3(&mut rng, 3, 3, 3);

        let y = conv.forward(&x);
        assert_eq!(y.dim(), (3, 3, 3));
        let (gx, gw, gb) = conv.backward(&x, &wsum);

        let h = 1e-6;
        let mut x_m = x.clone();
        for idx in [[0usize, 0, 0], [1, 3, 2], [0, 5, 5]] {
            let orig = x_m[idx];
            x_m[idx] = orig + h;
            let fp = (conv.forward(&x_m) * &wsum).sum();
            x_m[idx] = orig - h;
            let fm = (conv.forward(&x_m) * &wsum).sum();
            x_m[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-7, "gx mismatch at {idx:?}: fd={fd} an={}", gx[idx]);
        }
        for idx in [[0usize, 0, 0, 0], [2, 1, 2, 1], [1, 1, 1, 1]] {
            let orig = conv.weight[idx];
            conv.weight[idx] = orig + h;
            let fp = (conv.forward(&x) * &wsum).sum();
            conv.weight[idx] = orig - h;
            let fm = (conv.forward(&x) * &wsum).sum();
            conv.weight[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-7, "gw mismatch at {idx:?}");
        }
        for o in 0..3 {
            let orig = conv.bias[o];
            conv.bias[o] = orig + h;
            let fp = (conv.forward(&x) * &wsum).sum();
            conv.bias[o] = orig - h;
            let fm = (conv.forward(&x) * &wsum).sum();
            conv.bias[o] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gb[o]).abs() < 1e-7, "gb mismatch at {o}");
        }
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut aff = ChannelAffine::<f64>::identity(3);
        aff.gamma = Array1::from_shape_fn(3, |_| rng.gen_range(0.5..1.5));
        aff.beta = Array1::from_shape_fn(3, |_| rng.gen_range(-0.3..0.3));
        let x = rand_array3(&mut rng, 3, 4, 4);
        let wsum = rand_array3(&mut rng, 3, 4, 4);
        let (gx, gg, gb) = aff.backward(&x, &wsum);

        let h = 1e-6;
        for c in 0..3 {
            let orig = aff.gamma[c];
            aff.gamma[c] = orig + h;
            let fp = (aff.forward(&x) * &wsum).sum();
            aff.gamma[c] = orig - h;
            let fm = (aff.forward(&x) * &wsum).sum();
            aff.gamma[c] = orig;
            assert!(((fp - fm) / (2.0 * h) - gg[c]).abs() < 1e-7);

            let orig = aff.beta[c];
            aff.beta[c] = orig + h;
            let fp = (aff.forward(&x) * &wsum).sum();
            aff.beta[c] = orig - h;
            let fm = (aff.forward(&x) * &wsum).sum();
            aff.beta[c] = orig;
            assert!(((fp - fm) / (2.0 * h) - gb[c]).abs() < 1e-7);
        }
        for c in 0..3 {
            assert!((gx[[c, 0, 0]] - aff.gamma[c] * wsum[[c, 0, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn leaky_relu_roundtrip() {
        let x = ndarray::arr3(&[[[-2.0_f64, 0.0], [3.0, -0.5]]]);
        let y = leaky_relu(&x);
        assert_eq!(y[[0, 0, 0]], -0.02);
        assert_eq!(y[[0, 0, 1]], 0.0);
        assert_eq!(y[[0, 1, 0]], 3.0);
        let gy = Array3::ones((1, 2, 2));
        let gx = leaky_relu_backward(&x, &gy);
        assert_eq!(gx[[0, 0, 0]], 0.01);
        assert_eq!(gx[[0, 1, 0]], 1.0);
    }

    #[test]
    fn upsample_then_backward_sums_fanout() {
        let x = ndarray::arr3(&[[[1.0_f64, 2.0], [3.0, 4.0]]]);
        let y = upsample_nearest2(&x);
        assert_eq!(y.dim(), (1, 4, 4));
        assert_eq!(y[[0, 0, 1]], 1.0);
        assert_eq!(y[[0, 3, 3]], 4.0);
        let gy = Array3::from_elem((1, 4, 4), 0.25);
        let gx = upsample_nearest2_backward(&gy);
        assert_eq!(gx[[0, 0, 0]], 1.0);
    }
}
