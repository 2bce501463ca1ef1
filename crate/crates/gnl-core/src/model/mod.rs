//! The reverse-distillation architecture: a frozen multi-scale teacher
//! encoder, a trainable one-class bottleneck embedding, and a trainable
//! student decoder that reconstructs the teacher's feature pyramid from the
//! bottleneck.
//!
//! Desk-scale layout for input `(C, H, W)` with block channels `(c1, c2, c3)`:
//!
//! ```text
//! teacher   stem 4x4/s4 -> res(c1)/s1 -> p1 (c1, H/4)
//!                          res(c2)/s2 -> p2 (c2, H/8)
//!                          res(c3)/s2 -> p3 (c3, H/16)
//! bottleneck p1 --s2--> --s2--\
//!            p2 ------s2------ concat -> 1x1 -> bn (cb, H/16)
//!            p3 --------------/
//! decoder   bn -> res -> l3 (c3, H/16)
//!              -> up2 -> res -> l2 (c2, H/8)
//!              -> up2 -> res -> l1 (c1, H/4)
//! ```

mod blocks;
pub mod checkpoint;

pub use blocks::{accumulate, scale, ConvUnit, ParamTensors, ResBlock};

use ndarray::{concatenate, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GnlError, Result};
use crate::losses::LossWeights;
use crate::tensor::{FeatureMap, FeaturePyramid, ImageTensor, ReconPyramid, Scalar};

use self::blocks::{ConvUnitCache, ResBlockCache};
use crate::nn::{leaky_relu, leaky_relu_backward, upsample_nearest2, upsample_nearest2_backward};

/// Standard deviation of the teacher's fixed-scale random init. The teacher
/// only needs to produce diverse, well-conditioned features; pretrained
/// weights can replace it via [`load_teacher_weights`].
const TEACHER_INIT_STD: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub block_channels: (usize, usize, usize),
    pub bottleneck_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            block_channels: (16, 32, 64),
            bottleneck_channels: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (c1, c2, c3) = self.block_channels;
        if c1 == 0 || !(c1 < c2 && c2 < c3) {
            return Err(GnlError::Config(format!(
                "block_channels must be strictly increasing and positive, got ({c1}, {c2}, {c3})"
            )));
        }
        if self.bottleneck_channels == 0 {
            return Err(GnlError::Config("bottleneck_channels must be positive".into()));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(GnlError::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        Ok(())
    }
}

/// Frozen teacher encoder parameters.
#[derive(Debug, Clone)]
pub struct TeacherParams<F> {
    pub stem: ConvUnit<F>,
    pub block1: ResBlock<F>,
    pub block2: ResBlock<F>,
    pub block3: ResBlock<F>,
}

impl<F: Scalar> ParamTensors<F> for TeacherParams<F> {
    fn zeros_like(&self) -> Self {
        Self {
            stem: ParamTensors::zeros_like(&self.stem),
            block1: ParamTensors::zeros_like(&self.block1),
            block2: ParamTensors::zeros_like(&self.block2),
            block3: ParamTensors::zeros_like(&self.block3),
        }
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut v = self.stem.slices();
        v.extend(self.block1.slices());
        v.extend(self.block2.slices());
        v.extend(self.block3.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.stem.slices_mut();
        v.extend(self.block1.slices_mut());
        v.extend(self.block2.slices_mut());
        v.extend(self.block3.slices_mut());
        v
    }
}

/// Trainable one-class bottleneck: p1 and p2 are strided down to p3's
/// spatial size, concatenated with p3, and fused by a 1x1 projection.
#[derive(Debug, Clone)]
pub struct BottleneckParams<F> {
    pub down1a: ConvUnit<F>,
    pub down1b: ConvUnit<F>,
    pub down2: ConvUnit<F>,
    pub fuse: ConvUnit<F>,
}

impl<F: Scalar> ParamTensors<F> for BottleneckParams<F> {
    fn zeros_like(&self) -> Self {
        Self {
            down1a: ParamTensors::zeros_like(&self.down1a),
            down1b: ParamTensors::zeros_like(&self.down1b),
            down2: ParamTensors::zeros_like(&self.down2),
            fuse: ParamTensors::zeros_like(&self.fuse),
        }
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut v = self.down1a.slices();
        v.extend(self.down1b.slices());
        v.extend(self.down2.slices());
        v.extend(self.fuse.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.down1a.slices_mut();
        v.extend(self.down1b.slices_mut());
        v.extend(self.down2.slices_mut());
        v.extend(self.fuse.slices_mut());
        v
    }
}

/// Trainable student decoder; blocks stored in application order
/// (bottleneck scale first).
#[derive(Debug, Clone)]
pub struct DecoderParams<F> {
    pub block3: ResBlock<F>,
    pub block2: ResBlock<F>,
    pub block1: ResBlock<F>,
}

impl<F: Scalar> ParamTensors<F> for DecoderParams<F> {
    fn zeros_like(&self) -> Self {
        Self {
            block3: ParamTensors::zeros_like(&self.block3),
            block2: ParamTensors::zeros_like(&self.block2),
            block1: ParamTensors::zeros_like(&self.block1),
        }
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut v = self.block3.slices();
        v.extend(self.block2.slices());
        v.extend(self.block1.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.block3.slices_mut();
        v.extend(self.block2.slices_mut());
        v.extend(self.block1.slices_mut());
        v
    }
}

/// Provenance recorded by training and carried inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub seed: u64,
    pub weights: LossWeights,
    /// Verbatim run-config text, when training was driven by a config file.
    #[serde(default)]
    pub run_config: String,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self { epochs: 0, seed: 0, weights: LossWeights::default(), run_config: String::new() }
    }
}

/// Frozen teacher + trainable bottleneck/decoder + provenance.
#[derive(Debug, Clone)]
pub struct ModelBundle<F = f32> {
    pub config: ModelConfig,
    pub teacher: TeacherParams<F>,
    pub bottleneck: BottleneckParams<F>,
    pub decoder: DecoderParams<F>,
    pub meta: TrainingMeta,
}

fn init_conv_unit<F: Scalar>(unit: &mut ConvUnit<F>, rng: &mut ChaCha8Rng, fixed_std: Option<f64>) {
    let (_, in_ch, kh, kw) = unit.conv.weight.dim();
    let std = fixed_std.unwrap_or_else(|| (2.0 / (in_ch * kh * kw) as f64).sqrt());
    let dist = Normal::new(0.0, std).expect("valid std");
    for v in unit.conv.weight.iter_mut() {
        *v = F::from_f64_lossy(dist.sample(rng));
    }
    // Biases zero, affine starts as identity (set by `zeros` constructors).
    for v in unit.affine.gamma.iter_mut() {
        *v = F::one();
    }
}

fn init_res_block<F: Scalar>(block: &mut ResBlock<F>, rng: &mut ChaCha8Rng, fixed_std: Option<f64>) {
    init_conv_unit(&mut block.conv1, rng, fixed_std);
    init_conv_unit(&mut block.conv2, rng, fixed_std);
    if let Some(skip) = &mut block.skip {
        init_conv_unit(skip, rng, fixed_std);
    }
}

/// Zero-valued parameter structures with the shapes implied by `config`.
/// Defines the architecture wiring in one place; the checkpoint loader fills
/// these in visitor order.
pub(crate) fn zero_params<F: Scalar>(
    config: &ModelConfig,
) -> (TeacherParams<F>, BottleneckParams<F>, DecoderParams<F>) {
    let (c1, c2, c3) = config.block_channels;
    let cb = config.bottleneck_channels;
    let teacher = TeacherParams {
        stem: ConvUnit::zeros(c1, config.in_channels, 4, 4, 0),
        block1: ResBlock::zeros(c1, c1, 1),
        block2: ResBlock::zeros(c1, c2, 2),
        block3: ResBlock::zeros(c2, c3, 2),
    };
    let bottleneck = BottleneckParams {
        down1a: ConvUnit::zeros(c2, c1, 3, 2, 1),
        down1b: ConvUnit::zeros(c3, c2, 3, 2, 1),
        down2: ConvUnit::zeros(c3, c2, 3, 2, 1),
        fuse: ConvUnit::zeros(cb, 3 * c3, 1, 1, 0),
    };
    let decoder = DecoderParams {
        block3: ResBlock::zeros(cb, c3, 1),
        block2: ResBlock::zeros(c3, c2, 1),
        block1: ResBlock::zeros(c2, c1, 1),
    };
    (teacher, bottleneck, decoder)
}

/// Deterministic parameter initialization from `config.seed`. The teacher
/// uses a fixed-scale random init; trainable parts use fan-in-scaled init.
pub fn init_model<F: Scalar>(config: &ModelConfig) -> Result<ModelBundle<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut teacher, mut bottleneck, mut decoder) = zero_params::<F>(config);

    init_conv_unit(&mut teacher.stem, &mut rng, Some(TEACHER_INIT_STD));
    init_res_block(&mut teacher.block1, &mut rng, Some(TEACHER_INIT_STD));
    init_res_block(&mut teacher.block2, &mut rng, Some(TEACHER_INIT_STD));
    init_res_block(&mut teacher.block3, &mut rng, Some(TEACHER_INIT_STD));

    init_conv_unit(&mut bottleneck.down1a, &mut rng, None);
    init_conv_unit(&mut bottleneck.down1b, &mut rng, None);
    init_conv_unit(&mut bottleneck.down2, &mut rng, None);
    init_conv_unit(&mut bottleneck.fuse, &mut rng, None);

    init_res_block(&mut decoder.block3, &mut rng, None);
    init_res_block(&mut decoder.block2, &mut rng, None);
    init_res_block(&mut decoder.block1, &mut rng, None);

    Ok(ModelBundle { config: config.clone(), teacher, bottleneck, decoder, meta: TrainingMeta::default() })
}

fn check_image<F: Scalar>(image: &ImageTensor<F>, config: &ModelConfig) -> Result<()> {
    if image.channels() != config.in_channels {
        return Err(GnlError::Shape(format!(
            "image has {} channels, model expects {}",
            image.channels(),
            config.in_channels
        )));
    }
    Ok(())
}

/// Teacher encoder: three residual-block outputs at strides 4, 8, 16.
pub fn encode<F: Scalar>(
    image: &ImageTensor<F>,
    bundle: &ModelBundle<F>,
) -> Result<(FeatureMap<F>, FeatureMap<F>, FeatureMap<F>)> {
    check_image(image, &bundle.config)?;
    let t = &bundle.teacher;
    let stem = leaky_relu(&t.stem.forward(image.data()));
    let p1 = t.block1.forward(&stem);
    let p2 = t.block2.forward(&p1);
    let p3 = t.block3.forward(&p2);
    Ok((p1, p2, p3))
}

/// One encoder stage in isolation, used by the test-time augmentation path
/// which interleaves feature-distribution matching between stages.
pub fn encode_stage<F: Scalar>(
    bundle: &ModelBundle<F>,
    stage: usize,
    input: &Array3<F>,
) -> FeatureMap<F> {
    let t = &bundle.teacher;
    match stage {
        1 => t.block1.forward(&leaky_relu(&t.stem.forward(input))),
        2 => t.block2.forward(input),
        3 => t.block3.forward(input),
        _ => unreachable!("encoder stages are 1..=3"),
    }
}

pub struct BottleneckCache<F> {
    d1a: ConvUnitCache<F>,
    a1a: Array3<F>,
    d1b: ConvUnitCache<F>,
    a1b: Array3<F>,
    d2: ConvUnitCache<F>,
    a2: Array3<F>,
    fuse: ConvUnitCache<F>,
    split: (usize, usize),
}

fn bottleneck_forward_impl<F: Scalar>(
    bn: &BottleneckParams<F>,
    p1: &FeatureMap<F>,
    p2: &FeatureMap<F>,
    p3: &FeatureMap<F>,
    with_cache: bool,
) -> (FeatureMap<F>, Option<BottleneckCache<F>>) {
    let (a1a, c1a) = bn.down1a.forward_cached(p1);
    let t1 = leaky_relu(&a1a);
    let (a1b, c1b) = bn.down1b.forward_cached(&t1);
    let t2 = leaky_relu(&a1b);
    let (a2, c2) = bn.down2.forward_cached(p2);
    let u = leaky_relu(&a2);
    let cat = concatenate(Axis(0), &[t2.view(), u.view(), p3.view()]).expect("channel concat");
    let (out, cf) = bn.fuse.forward_cached(&cat);
    let cache = if with_cache {
        Some(BottleneckCache {
            d1a: c1a,
            a1a,
            d1b: c1b,
            a1b,
            d2: c2,
            a2,
            fuse: cf,
            split: (t2.dim().0, u.dim().0),
        })
    } else {
        None
    };
    (out, cache)
}

/// Fuses the teacher pyramid into the one-class bottleneck embedding, spatial
/// size equal to `p3`'s.
pub fn bottleneck_embed<F: Scalar>(
    p1: &FeatureMap<F>,
    p2: &FeatureMap<F>,
    p3: &FeatureMap<F>,
    bundle: &ModelBundle<F>,
) -> Result<FeatureMap<F>> {
    validate_pyramid_shapes(&bundle.config, p1, p2, p3)?;
    Ok(bottleneck_forward_impl(&bundle.bottleneck, p1, p2, p3, false).0)
}

pub(crate) fn bottleneck_embed_cached<F: Scalar>(
    bundle: &ModelBundle<F>,
    p1: &FeatureMap<F>,
    p2: &FeatureMap<F>,
    p3: &FeatureMap<F>,
) -> (FeatureMap<F>, BottleneckCache<F>) {
    let (out, cache) = bottleneck_forward_impl(&bundle.bottleneck, p1, p2, p3, true);
    (out, cache.expect("cache requested"))
}

/// Backward through the bottleneck. Gradients w.r.t. the teacher features are
/// discarded (the teacher is frozen and images need no gradient).
pub(crate) fn bottleneck_backward<F: Scalar>(
    bn: &BottleneckParams<F>,
    cache: &BottleneckCache<F>,
    g_out: &Array3<F>,
    grads: &mut BottleneckParams<F>,
) {
    let g_cat = bn.fuse.backward(&cache.fuse, g_out, &mut grads.fuse);
    let (n_t2, n_u) = cache.split;
    let g_t2 = g_cat.slice(ndarray::s![..n_t2, .., ..]).to_owned();
    let g_u = g_cat.slice(ndarray::s![n_t2..n_t2 + n_u, .., ..]).to_owned();
    // Third split (p3) discarded: frozen teacher.
    let g_a1b = leaky_relu_backward(&cache.a1b, &g_t2);
    let g_t1 = bn.down1b.backward(&cache.d1b, &g_a1b, &mut grads.down1b);
    let g_a1a = leaky_relu_backward(&cache.a1a, &g_t1);
    let _ = bn.down1a.backward(&cache.d1a, &g_a1a, &mut grads.down1a);
    let g_a2 = leaky_relu_backward(&cache.a2, &g_u);
    let _ = bn.down2.backward(&cache.d2, &g_a2, &mut grads.down2);
}

pub struct DecoderCache<F> {
    rb3: ResBlockCache<F>,
    rb2: ResBlockCache<F>,
    rb1: ResBlockCache<F>,
}

fn decode_impl<F: Scalar>(
    dec: &DecoderParams<F>,
    bn: &FeatureMap<F>,
    with_cache: bool,
) -> (ReconPyramid<F>, Option<DecoderCache<F>>) {
    if with_cache {
        let (l3, rb3) = dec.block3.forward_cached(bn);
        let (l2, rb2) = dec.block2.forward_cached(&upsample_nearest2(&l3));
        let (l1, rb1) = dec.block1.forward_cached(&upsample_nearest2(&l2));
        (ReconPyramid { l1, l2, l3 }, Some(DecoderCache { rb3, rb2, rb1 }))
    } else {
        let l3 = dec.block3.forward(bn);
        let l2 = dec.block2.forward(&upsample_nearest2(&l3));
        let l1 = dec.block1.forward(&upsample_nearest2(&l2));
        (ReconPyramid { l1, l2, l3 }, None)
    }
}

/// Mirror decoder: emits l3 at bottleneck scale, then l2, then l1 via x2
/// upsampling residual blocks.
pub fn decode<F: Scalar>(bn: &FeatureMap<F>, bundle: &ModelBundle<F>) -> Result<ReconPyramid<F>> {
    if bn.dim().0 != bundle.config.bottleneck_channels {
        return Err(GnlError::Shape(format!(
            "bottleneck input has {} channels, expected {}",
            bn.dim().0,
            bundle.config.bottleneck_channels
        )));
    }
    Ok(decode_impl(&bundle.decoder, bn, false).0)
}

pub(crate) fn decode_cached<F: Scalar>(
    bundle: &ModelBundle<F>,
    bn: &FeatureMap<F>,
) -> (ReconPyramid<F>, DecoderCache<F>) {
    let (rec, cache) = decode_impl(&bundle.decoder, bn, true);
    (rec, cache.expect("cache requested"))
}

/// Backward through the decoder given upstream gradients at l1, l2, l3.
/// Returns the gradient at the bottleneck embedding.
pub(crate) fn decoder_backward<F: Scalar>(
    dec: &DecoderParams<F>,
    cache: &DecoderCache<F>,
    g_l1: &Array3<F>,
    g_l2: &Array3<F>,
    g_l3: &Array3<F>,
    grads: &mut DecoderParams<F>,
) -> Array3<F> {
    let g_u1 = dec.block1.backward(&cache.rb1, g_l1, &mut grads.block1);
    let g_l2_total = upsample_nearest2_backward(&g_u1) + g_l2;
    let g_u2 = dec.block2.backward(&cache.rb2, &g_l2_total, &mut grads.block2);
    let g_l3_total = upsample_nearest2_backward(&g_u2) + g_l3;
    dec.block3.backward(&cache.rb3, &g_l3_total, &mut grads.block3)
}

fn validate_pyramid_shapes<F: Scalar>(
    config: &ModelConfig,
    p1: &FeatureMap<F>,
    p2: &FeatureMap<F>,
    p3: &FeatureMap<F>,
) -> Result<()> {
    let (c1, c2, c3) = config.block_channels;
    let ok = p1.dim().0 == c1
        && p2.dim().0 == c2
        && p3.dim().0 == c3
        && p1.dim().1 == 2 * p2.dim().1
        && p1.dim().2 == 2 * p2.dim().2
        && p2.dim().1 == 2 * p3.dim().1
        && p2.dim().2 == 2 * p3.dim().2;
    if !ok {
        return Err(GnlError::Shape(format!(
            "pyramid shapes {:?}/{:?}/{:?} do not match config channels ({c1}, {c2}, {c3})",
            p1.dim(),
            p2.dim(),
            p3.dim()
        )));
    }
    Ok(())
}

/// Full forward pass: encode, embed, decode.
pub fn forward<F: Scalar>(
    image: &ImageTensor<F>,
    bundle: &ModelBundle<F>,
) -> Result<(FeaturePyramid<F>, ReconPyramid<F>)> {
    let (p1, p2, p3) = encode(image, bundle)?;
    let bn = bottleneck_embed(&p1, &p2, &p3, bundle)?;
    let rec = decode(&bn, bundle)?;
    Ok((FeaturePyramid { p1, p2, p3, bn }, rec))
}

pub use checkpoint::{load_checkpoint, load_teacher_weights, save_checkpoint};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn image(c: usize, h: usize, w: usize) -> ImageTensor<f32> {
        ImageTensor::new(Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
            ((ch * 31 + i * 7 + j * 3) % 97) as f32 / 96.0
        }))
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig { seed: 7, ..Default::default() };
        let a: ModelBundle<f32> = init_model(&cfg).unwrap();
        let b: ModelBundle<f32> = init_model(&cfg).unwrap();
        for (sa, sb) in a.teacher.slices().iter().zip(b.teacher.slices()) {
            assert_eq!(sa, &sb);
        }
        for (sa, sb) in a.bottleneck.slices().iter().zip(b.bottleneck.slices()) {
            assert_eq!(sa, &sb);
        }
        for (sa, sb) in a.decoder.slices().iter().zip(b.decoder.slices()) {
            assert_eq!(sa, &sb);
        }
    }

    #[test]
    fn rejects_non_increasing_channels() {
        let cfg = ModelConfig { block_channels: (8, 4, 2), ..Default::default() };
        assert!(matches!(init_model::<f32>(&cfg), Err(GnlError::Config(_))));
    }

    #[test]
    fn encode_shapes_for_64x64() {
        let cfg = ModelConfig { seed: 1, ..Default::default() };
        let bundle: ModelBundle<f32> = init_model(&cfg).unwrap();
        let img = image(3, 64, 64);
        let (p1, p2, p3) = encode(&img, &bundle).unwrap();
        assert_eq!(p1.dim(), (16, 16, 16));
        assert_eq!(p2.dim(), (32, 8, 8));
        assert_eq!(p3.dim(), (64, 4, 4));
        let bn = bottleneck_embed(&p1, &p2, &p3, &bundle).unwrap();
        assert_eq!(bn.dim(), (64, 4, 4));
        let rec = decode(&bn, &bundle).unwrap();
        assert_eq!(rec.l1.dim(), p1.dim());
        assert_eq!(rec.l2.dim(), p2.dim());
        assert_eq!(rec.l3.dim(), p3.dim());
    }

    #[test]
    fn encode_is_deterministic_and_finite_on_zero_image() {
        let cfg = ModelConfig { seed: 3, ..Default::default() };
        let bundle: ModelBundle<f32> = init_model(&cfg).unwrap();
        let zero = ImageTensor::new(Array3::zeros((3, 32, 32))).unwrap();
        let (a1, a2, a3) = encode(&zero, &bundle).unwrap();
        let (b1, _, _) = encode(&zero, &bundle).unwrap();
        assert_eq!(a1, b1);
        assert!(a1.iter().chain(a2.iter()).chain(a3.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn bottleneck_uses_all_scales() {
        let cfg = ModelConfig { seed: 5, ..Default::default() };
        let bundle: ModelBundle<f32> = init_model(&cfg).unwrap();
        let img = image(3, 32, 32);
        let (p1, p2, p3) = encode(&img, &bundle).unwrap();
        let bn = bottleneck_embed(&p1, &p2, &p3, &bundle).unwrap();
        let mut p1b = p1.clone();
        p1b[[0, 0, 0]] += 0.5;
        let bn2 = bottleneck_embed(&p1b, &p2, &p3, &bundle).unwrap();
        assert_ne!(bn, bn2, "perturbing p1 must change the embedding");
        // All-zero pyramid still yields finite output.
        let z1 = Array3::zeros(p1.dim());
        let z2 = Array3::zeros(p2.dim());
        let z3 = Array3::zeros(p3.dim());
        let bnz = bottleneck_embed(&z1, &z2, &z3, &bundle).unwrap();
        assert!(bnz.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_pyramid_rejected() {
        let cfg = ModelConfig { seed: 5, ..Default::default() };
        let bundle: ModelBundle<f32> = init_model(&cfg).unwrap();
        let img = image(3, 32, 32);
        let (p1, p2, p3) = encode(&img, &bundle).unwrap();
        let bad = Array3::<f32>::zeros((p2.dim().0, p2.dim().1, p2.dim().2 * 2));
        assert!(matches!(
            bottleneck_embed(&p1, &bad, &p3, &bundle),
            Err(GnlError::Shape(_))
        ));
        let _ = p2;
    }

    #[test]
    fn forward_batch_equals_per_image() {
        let cfg = ModelConfig { seed: 9, ..Default::default() };
        let bundle: ModelBundle<f32> = init_model(&cfg).unwrap();
        let images = [image(3, 32, 32), image(3, 32, 32)];
        let solo: Vec<_> = images.iter().map(|im| forward(im, &bundle).unwrap().1.l1).collect();
        // "Batched" processing is a loop over samples; rerun in reverse order.
        let rev: Vec<_> = images.iter().rev().map(|im| forward(im, &bundle).unwrap().1.l1).collect();
        assert_eq!(solo[0], rev[1]);
        assert_eq!(solo[1], rev[0]);
    }
}
