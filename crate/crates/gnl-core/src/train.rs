//! The distribution-invariant normality training loop: per batch, forward
//! the original image and its N augmented variants, accumulate the three
//! losses, and apply one Adam update to the bottleneck and decoder. The
//! teacher is never touched.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augmix_normal, AugmentConfig};
use crate::error::{GnlError, Result};
use crate::losses::{
    cosine_feature_loss_backward, loss_abs, loss_lowf, loss_ori, total_loss, LossReport, LossWeights,
};
use crate::model::{
    bottleneck_backward, bottleneck_embed_cached, decode_cached, decoder_backward, encode, scale,
    BottleneckParams, DecoderParams, ModelBundle, ParamTensors,
};
use crate::tensor::{FeatureMap, FeaturePyramid, ImageTensor, ReconPyramid, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Number of augmented normal copies per sample (N).
    pub n_augments: usize,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.005,
            adam_betas: (0.5, 0.999),
            adam_eps: 1e-8,
            n_augments: 2,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(GnlError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(GnlError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(GnlError::Config("learning_rate must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(GnlError::Config("adam betas must be in [0, 1)".into()));
        }
        if self.n_augments < 1 {
            return Err(GnlError::Config("n_augments must be >= 1".into()));
        }
        self.weights.validate()?;
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub epoch: u32,
    pub l_ori: f64,
    pub l_abs: f64,
    pub l_lowf: f64,
    pub total: f64,
    pub wall_time: f64,
}

/// One row per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,l_ori,l_abs,l_lowf,total,wall_time")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.epoch, r.l_ori, r.l_abs, r.l_lowf, r.total, r.wall_time)?;
        }
        Ok(())
    }
}

/// First/second-moment Adam state aligned to one parameter module.
#[derive(Debug, Clone)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P> AdamState<P> {
    pub fn new<F: Scalar>(params: &P) -> Self
    where
        P: ParamTensors<F>,
    {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update:
/// `m <- b1 m + (1-b1) g; v <- b2 v + (1-b2) g^2; p <- p - lr m^ / (sqrt(v^) + eps)`.
pub fn adam_update<F: Scalar, P: ParamTensors<F>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.param_count() != grads.param_count() {
        return Err(GnlError::Shape(format!(
            "adam: {} params vs {} grads",
            params.param_count(),
            grads.param_count()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::from_f64_lossy(betas.0), F::from_f64_lossy(betas.1));
    let one = F::one();
    let corr1 = one - b1.powi(t);
    let corr2 = one - b2.powi(t);
    let lr = F::from_f64_lossy(lr);
    let eps = F::from_f64_lossy(eps);

    let g_slices = grads.slices();
    let mut m_slices = state.m.slices_mut();
    let mut v_slices = state.v.slices_mut();
    for ((p, g), (m, v)) in params
        .slices_mut()
        .into_iter()
        .zip(g_slices)
        .zip(m_slices.iter_mut().zip(v_slices.iter_mut()))
    {
        if p.len() != g.len() {
            return Err(GnlError::Shape("adam: tensor shape mismatch".into()));
        }
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Teacher features for one training sample: the original image's trio plus
/// one trio per augmented copy. Encoding is done once up front because the
/// teacher is frozen.
pub struct TrainSample<F> {
    pub ori: (FeatureMap<F>, FeatureMap<F>, FeatureMap<F>),
    pub augs: Vec<(FeatureMap<F>, FeatureMap<F>, FeatureMap<F>)>,
}

impl<F: Scalar> TrainSample<F> {
    pub fn encode(
        bundle: &ModelBundle<F>,
        original: &ImageTensor<F>,
        augmented: &[ImageTensor<F>],
    ) -> Result<Self> {
        let ori = encode(original, bundle)?;
        let augs = augmented.iter().map(|img| encode(img, bundle)).collect::<Result<Vec<_>>>()?;
        Ok(Self { ori, augs })
    }
}

/// Gradients of the trainable halves.
#[derive(Debug, Clone)]
pub struct StudentGrads<F> {
    pub bottleneck: BottleneckParams<F>,
    pub decoder: DecoderParams<F>,
}

impl<F: Scalar> StudentGrads<F> {
    pub fn zeros(bundle: &ModelBundle<F>) -> Self {
        Self {
            bottleneck: bundle.bottleneck.zeros_like(),
            decoder: bundle.decoder.zeros_like(),
        }
    }
}

impl<F: Scalar> ParamTensors<F> for StudentGrads<F> {
    fn zeros_like(&self) -> Self {
        Self {
            bottleneck: self.bottleneck.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    fn slices(&self) -> Vec<&[F]> {
        let mut v = self.bottleneck.slices();
        v.extend(self.decoder.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut v = self.bottleneck.slices_mut();
        v.extend(self.decoder.slices_mut());
        v
    }
}

struct SampleForward<F: Scalar> {
    pyr_ori: FeaturePyramid<F>,
    rec_ori: ReconPyramid<F>,
    bn_augs: Vec<FeatureMap<F>>,
    l1_augs: Vec<FeatureMap<F>>,
}

fn forward_sample<F: Scalar>(
    bundle: &ModelBundle<F>,
    sample: &TrainSample<F>,
    with_caches: bool,
) -> (SampleForward<F>, Option<SampleCaches<F>>) {
    let (p1, p2, p3) = sample.ori.clone();
    let (bn, bn_cache) = bottleneck_embed_cached(bundle, &p1, &p2, &p3);
    let (rec, dec_cache) = decode_cached(bundle, &bn);
    let mut bn_augs = Vec::with_capacity(sample.augs.len());
    let mut l1_augs = Vec::with_capacity(sample.augs.len());
    let mut aug_caches = Vec::with_capacity(sample.augs.len());
    for (a1, a2, a3) in &sample.augs {
        let (bn_a, bn_c) = bottleneck_embed_cached(bundle, a1, a2, a3);
        let (rec_a, dec_c) = decode_cached(bundle, &bn_a);
        bn_augs.push(bn_a);
        l1_augs.push(rec_a.l1);
        aug_caches.push((bn_c, dec_c));
    }
    let fwd = SampleForward {
        pyr_ori: FeaturePyramid { p1, p2, p3, bn },
        rec_ori: rec,
        bn_augs,
        l1_augs,
    };
    let caches = if with_caches {
        Some(SampleCaches { bn_ori: bn_cache, dec_ori: dec_cache, augs: aug_caches })
    } else {
        None
    };
    (fwd, caches)
}

struct SampleCaches<F: Scalar> {
    bn_ori: crate::model::BottleneckCache<F>,
    dec_ori: crate::model::DecoderCache<F>,
    augs: Vec<(crate::model::BottleneckCache<F>, crate::model::DecoderCache<F>)>,
}

fn sample_losses<F: Scalar>(fwd: &SampleForward<F>, weights: &LossWeights) -> Result<LossReport> {
    let l_ori = loss_ori(&fwd.pyr_ori, &fwd.rec_ori)?;
    let (l_abs_v, l_lowf_v) = if fwd.bn_augs.is_empty() {
        (0.0, 0.0)
    } else {
        (
            loss_abs(&fwd.pyr_ori.bn, &fwd.bn_augs)?,
            loss_lowf(&fwd.rec_ori.l1, &fwd.l1_augs)?,
        )
    };
    total_loss(l_ori, l_abs_v, l_lowf_v, weights)
}

/// Batch loss over precomputed teacher features; forward only. The batch
/// reduction is the mean.
pub fn batch_loss<F: Scalar>(
    bundle: &ModelBundle<F>,
    samples: &[TrainSample<F>],
    weights: &LossWeights,
) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(GnlError::Config("batch_loss requires a non-empty batch".into()));
    }
    let mut acc = LossReport { l_ori: 0.0, l_abs: 0.0, l_lowf: 0.0, total: 0.0 };
    for sample in samples {
        let (fwd, _) = forward_sample(bundle, sample, false);
        let r = sample_losses(&fwd, weights)?;
        acc.l_ori += r.l_ori;
        acc.l_abs += r.l_abs;
        acc.l_lowf += r.l_lowf;
        acc.total += r.total;
    }
    let n = samples.len() as f64;
    Ok(LossReport { l_ori: acc.l_ori / n, l_abs: acc.l_abs / n, l_lowf: acc.l_lowf / n, total: acc.total / n })
}

/// Batch loss plus analytic gradients of the weighted total with respect to
/// every bottleneck and decoder parameter. Gradients flow through both sides
/// of every similarity pair; the teacher features are constants.
pub fn loss_and_gradients<F: Scalar>(
    bundle: &ModelBundle<F>,
    samples: &[TrainSample<F>],
    weights: &LossWeights,
) -> Result<(LossReport, StudentGrads<F>)> {
    if samples.is_empty() {
        return Err(GnlError::Config("loss_and_gradients requires a non-empty batch".into()));
    }
    let mut grads = StudentGrads::zeros(bundle);
    let mut acc = LossReport { l_ori: 0.0, l_abs: 0.0, l_lowf: 0.0, total: 0.0 };

    for (sample_idx, sample) in samples.iter().enumerate() {
        let (fwd, caches) = forward_sample(bundle, sample, true);
        let caches = caches.expect("caches requested");
        let report = sample_losses(&fwd, weights).map_err(|e| match e {
            GnlError::Numeric(msg) => GnlError::Numeric(format!("sample {sample_idx}: {msg}")),
            other => other,
        })?;
        acc.l_ori += report.l_ori;
        acc.l_abs += report.l_abs;
        acc.l_lowf += report.l_lowf;
        acc.total += report.total;

        let n_aug = sample.augs.len();
        let lam_ori = weights.lambda_ori;
        let lam_abs = weights.lambda_abs;
        let lam_lowf = weights.lambda_lowf;

        // Gradients at the original reconstruction from the base loss.
        let (_, mut g_l1) = cosine_feature_loss_backward(&fwd.pyr_ori.p1, &fwd.rec_ori.l1, lam_ori);
        let (_, g_l2) = cosine_feature_loss_backward(&fwd.pyr_ori.p2, &fwd.rec_ori.l2, lam_ori);
        let (_, g_l3) = cosine_feature_loss_backward(&fwd.pyr_ori.p3, &fwd.rec_ori.l3, lam_ori);

        // Low-feature agreement: pairs (l1_ori, l1_aug_k), averaged over N.
        let mut g_l1_augs: Vec<Option<crate::tensor::FeatureMap<F>>> = vec![None; n_aug];
        if lam_lowf > 0.0 && n_aug > 0 {
            let w = lam_lowf / n_aug as f64;
            for k in 0..n_aug {
                let (ga, gb) = cosine_feature_loss_backward(&fwd.rec_ori.l1, &fwd.l1_augs[k], w);
                g_l1 = g_l1 + ga;
                g_l1_augs[k] = Some(gb);
            }
        }

        // Original image: decoder backward, then bottleneck agreement, then
        // bottleneck backward.
        let mut g_bn_ori =
            decoder_backward(&bundle.decoder, &caches.dec_ori, &g_l1, &g_l2, &g_l3, &mut grads.decoder);

        let mut g_bn_augs: Vec<Option<crate::tensor::FeatureMap<F>>> = vec![None; n_aug];
        if lam_abs > 0.0 && n_aug > 0 {
            let w = lam_abs / n_aug as f64;
            for k in 0..n_aug {
                let (ga, gb) = cosine_feature_loss_backward(&fwd.pyr_ori.bn, &fwd.bn_augs[k], w);
                g_bn_ori = g_bn_ori + ga;
                g_bn_augs[k] = Some(gb);
            }
        }
        bottleneck_backward(&bundle.bottleneck, &caches.bn_ori, &g_bn_ori, &mut grads.bottleneck);

        // Augmented copies: gradients reach them through the agreement terms.
        for k in 0..n_aug {
            let (bn_cache, dec_cache) = &caches.augs[k];
            let mut g_bn_aug: Option<crate::tensor::FeatureMap<F>> = None;
            if let Some(g_l1_aug) = &g_l1_augs[k] {
                let zeros2 = ndarray::Array3::zeros(fwd.rec_ori.l2.dim());
                let zeros3 = ndarray::Array3::zeros(fwd.rec_ori.l3.dim());
                let g = decoder_backward(
                    &bundle.decoder,
                    dec_cache,
                    g_l1_aug,
                    &zeros2,
                    &zeros3,
                    &mut grads.decoder,
                );
                g_bn_aug = Some(g);
            }
            if let Some(gb) = &g_bn_augs[k] {
                g_bn_aug = Some(match g_bn_aug {
                    Some(g) => g + gb,
                    None => gb.clone(),
                });
            }
            if let Some(g) = g_bn_aug {
                bottleneck_backward(&bundle.bottleneck, bn_cache, &g, &mut grads.bottleneck);
            }
        }
    }

    let n = samples.len() as f64;
    scale(&mut grads.bottleneck, F::from_f64_lossy(1.0 / n));
    scale(&mut grads.decoder, F::from_f64_lossy(1.0 / n));
    let report =
        LossReport { l_ori: acc.l_ori / n, l_abs: acc.l_abs / n, l_lowf: acc.l_lowf / n, total: acc.total / n };
    if !report.is_finite() {
        return Err(GnlError::Numeric(format!("non-finite batch loss: {report:?}")));
    }
    Ok((report, grads))
}

/// Optimizer state for the two trainable halves. Adam is elementwise, so
/// updating them separately equals one joint update.
pub struct OptimizerState<F: Scalar> {
    pub bottleneck: AdamState<BottleneckParams<F>>,
    pub decoder: AdamState<DecoderParams<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(bundle: &ModelBundle<F>) -> Self {
        Self {
            bottleneck: AdamState::new(&bundle.bottleneck),
            decoder: AdamState::new(&bundle.decoder),
        }
    }
}

/// One training step on a batch of normal images: augment (unless the
/// weights degenerate to the base loss, in which case no augmentation rng is
/// consumed), forward, accumulate the three losses, and apply one Adam
/// update to bottleneck and decoder.
pub fn train_step(
    batch: &[ImageTensor<f32>],
    bundle: &mut ModelBundle<f32>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(GnlError::Config("train_step requires a non-empty batch".into()));
    }
    let base_only = cfg.weights.base_only();
    let mut samples = Vec::with_capacity(batch.len());
    for img in batch {
        let augmented: Vec<ImageTensor<f32>> = if base_only {
            Vec::new()
        } else {
            (0..cfg.n_augments)
                .map(|_| augmix_normal(img, &cfg.augment, rng))
                .collect::<Result<Vec<_>>>()?
        };
        samples.push(TrainSample::encode(bundle, img, &augmented)?);
    }
    let (report, grads) = loss_and_gradients(bundle, &samples, &cfg.weights)?;
    adam_update(
        &mut bundle.bottleneck,
        &grads.bottleneck,
        &mut opt.bottleneck,
        cfg.learning_rate,
        cfg.adam_betas,
        cfg.adam_eps,
    )?;
    adam_update(
        &mut bundle.decoder,
        &grads.decoder,
        &mut opt.decoder,
        cfg.learning_rate,
        cfg.adam_betas,
        cfg.adam_eps,
    )?;
    Ok(report)
}

/// Full training run: seeded per-epoch shuffling, `epochs x ceil(n / batch)`
/// steps, per-epoch mean losses in the log.
pub fn train(
    dataset: &[ImageTensor<f32>],
    cfg: &TrainConfig,
    mut bundle: ModelBundle<f32>,
) -> Result<(ModelBundle<f32>, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GnlError::Config("training dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&bundle);
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ImageTensor<f32>> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let report = train_step(&batch, &mut bundle, cfg, &mut opt, &mut rng).map_err(|e| match e {
                GnlError::Numeric(msg) => {
                    GnlError::Numeric(format!("epoch {epoch} batch {batch_idx}: {msg}"))
                }
                other => other,
            })?;
            sums.0 += report.l_ori;
            sums.1 += report.l_abs;
            sums.2 += report.l_lowf;
            sums.3 += report.total;
            batches += 1;
        }
        let n = batches as f64;
        log.rows.push(TrainLogRow {
            epoch,
            l_ori: sums.0 / n,
            l_abs: sums.1 / n,
            l_lowf: sums.2 / n,
            total: sums.3 / n,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    bundle.meta.epochs = cfg.epochs;
    bundle.meta.seed = cfg.seed;
    bundle.meta.weights = cfg.weights;
    Ok((bundle, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::param_bytes;
    use crate::model::{init_model, ModelConfig};
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig { block_channels: (4, 8, 16), bottleneck_channels: 16, seed: 13, ..Default::default() }
    }

    fn images(n: usize, seed: u64) -> Vec<ImageTensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                ImageTensor::new(Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0f32)))
                    .unwrap()
            })
            .collect()
    }

    #[derive(Debug, Clone)]
    struct Scalar1(Vec<f64>);

    impl ParamTensors<f64> for Scalar1 {
        fn zeros_like(&self) -> Self {
            Scalar1(vec![0.0; self.0.len()])
        }
        fn slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn adam_single_step_hand_oracle() {
        // p=0, g=1, lr=0.1, betas (0.5, 0.999), step 1:
        // m_hat = 1, v_hat = 1, p' = -0.1 / (1 + eps) ~ -0.1.
        let mut p = Scalar1(vec![0.0]);
        let g = Scalar1(vec![1.0]);
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &g, &mut st, 0.1, (0.5, 0.999), 1e-8).unwrap();
        assert!((p.0[0] + 0.1).abs() < 1e-8, "got {}", p.0[0]);
    }

    #[test]
    fn adam_zero_gradient_is_a_noop() {
        let mut p = Scalar1(vec![0.7, -0.3]);
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_update(&mut p, &g, &mut st, 0.1, (0.5, 0.999), 1e-8).unwrap();
        assert_eq!(p.0, vec![0.7, -0.3]);
    }

    #[test]
    fn adam_state_carries_across_steps() {
        // Two calls differ from one call, and carried moments change the
        // step once the gradient varies.
        let g1 = Scalar1(vec![1.0]);
        let g2 = Scalar1(vec![-1.0]);
        let mut carried = Scalar1(vec![0.0]);
        let mut st = AdamState::new(&carried);
        adam_update(&mut carried, &g1, &mut st, 0.1, (0.5, 0.999), 1e-8).unwrap();
        let after_one = carried.0[0];
        adam_update(&mut carried, &g2, &mut st, 0.1, (0.5, 0.999), 1e-8).unwrap();
        assert!((carried.0[0] - after_one).abs() > 1e-9);

        let mut fresh = Scalar1(vec![after_one]);
        let mut st_fresh = AdamState::new(&fresh);
        adam_update(&mut fresh, &g2, &mut st_fresh, 0.1, (0.5, 0.999), 1e-8).unwrap();
        assert!(
            (carried.0[0] - fresh.0[0]).abs() > 1e-6,
            "carried first moment must damp the sign flip: {} vs {}",
            carried.0[0],
            fresh.0[0]
        );
    }

    #[test]
    fn teacher_is_frozen_through_steps() {
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let mut bundle = init_model::<f32>(&tiny_config()).unwrap();
        let before = param_bytes(&bundle.teacher);
        let mut opt = OptimizerState::new(&bundle);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = images(4, 3);
        for _ in 0..3 {
            train_step(&batch, &mut bundle, &cfg, &mut opt, &mut rng).unwrap();
        }
        assert_eq!(before, param_bytes(&bundle.teacher), "teacher must stay bitwise identical");
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = TrainConfig { epochs: 1, batch_size: 4, ..Default::default() };
        let batch = images(4, 9);
        let run = || {
            let mut bundle = init_model::<f32>(&tiny_config()).unwrap();
            let mut opt = OptimizerState::new(&bundle);
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            train_step(&batch, &mut bundle, &cfg, &mut opt, &mut rng).unwrap();
            (param_bytes(&bundle.bottleneck), param_bytes(&bundle.decoder))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn base_only_step_matches_manual_distillation_step() {
        // lambda_abs = lambda_lowf = 0 must reproduce a plain distillation
        // step bitwise, with no augmentation rng consumed.
        let weights = LossWeights { lambda_ori: 1.0, lambda_abs: 0.0, lambda_lowf: 0.0 };
        let cfg = TrainConfig { weights, ..Default::default() };
        let batch = images(3, 17);

        let mut via_step = init_model::<f32>(&tiny_config()).unwrap();
        let mut opt = OptimizerState::new(&via_step);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rng_before: ChaCha8Rng = rng.clone();
        train_step(&batch, &mut via_step, &cfg, &mut opt, &mut rng).unwrap();
        assert_eq!(rng.get_word_pos(), rng_before.get_word_pos(), "no rng draws in base-only mode");

        let mut manual = init_model::<f32>(&tiny_config()).unwrap();
        let samples: Vec<TrainSample<f32>> = batch
            .iter()
            .map(|img| TrainSample::encode(&manual, img, &[]).unwrap())
            .collect();
        let (_, grads) = loss_and_gradients(&manual, &samples, &weights).unwrap();
        let mut opt2 = OptimizerState::new(&manual);
        adam_update(&mut manual.bottleneck, &grads.bottleneck, &mut opt2.bottleneck, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps).unwrap();
        adam_update(&mut manual.decoder, &grads.decoder, &mut opt2.decoder, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps).unwrap();

        assert_eq!(param_bytes(&via_step.bottleneck), param_bytes(&manual.bottleneck));
        assert_eq!(param_bytes(&via_step.decoder), param_bytes(&manual.decoder));
    }

    #[test]
    fn train_rejects_empty_dataset_and_bad_config() {
        let bundle = init_model::<f32>(&tiny_config()).unwrap();
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(matches!(train(&[], &cfg, bundle.clone()), Err(GnlError::Config(_))));
        let bad = TrainConfig { epochs: 0, ..Default::default() };
        assert!(matches!(train(&images(2, 1), &bad, bundle), Err(GnlError::Config(_))));
    }

    #[test]
    fn same_seed_same_final_parameters() {
        let cfg = TrainConfig { epochs: 2, batch_size: 4, seed: 33, ..Default::default() };
        let data = images(6, 100);
        let run = || {
            let bundle = init_model::<f32>(&tiny_config()).unwrap();
            let (out, log) = train(&data, &cfg, bundle).unwrap();
            (param_bytes(&out.bottleneck), param_bytes(&out.decoder), log.rows.len())
        };
        let (a_bn, a_dec, a_rows) = run();
        let (b_bn, b_dec, b_rows) = run();
        assert_eq!(a_bn, b_bn);
        assert_eq!(a_dec, b_dec);
        assert_eq!(a_rows, 2);
        assert_eq!(b_rows, 2);
    }
}
