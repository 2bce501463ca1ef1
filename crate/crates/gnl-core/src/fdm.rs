//! Feature distribution matching for test-time augmentation.
//!
//! The exact matcher sorts the per-channel values of the content and style
//! maps and interpolates between the two sorted sequences, scattering the
//! result back through the content's sort permutation: the content's spatial
//! layout is preserved while its per-channel value distribution is pulled
//! toward the style's. A Gaussian moment-matching variant is provided as the
//! alternate technique.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{GnlError, Result};
use crate::model::{encode_stage, ModelBundle};
use crate::tensor::{check_same_shape, FeatureMap, ImageTensor, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdmMethod {
    /// Sorted-value interpolation (exact empirical distribution matching).
    Exact,
    /// Per-channel mean/std interpolation under a Gaussian assumption.
    Moment,
}

impl FdmMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "exact" => Ok(FdmMethod::Exact),
            "moment" => Ok(FdmMethod::Moment),
            other => Err(GnlError::Config(format!("unknown FDM method '{other}'"))),
        }
    }
}

/// Test-time augmentation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdmConfig {
    pub method: FdmMethod,
    /// Mixing severity toward the style distribution.
    pub alpha: f64,
    /// Encoder blocks after which matching is applied. Default {1, 2}; the
    /// third block is accepted so the all-blocks variant stays testable.
    pub blocks: Vec<usize>,
    pub style_seed: u64,
    /// Number of independently drawn styles to average over (default 1).
    pub style_repeats: usize,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self { method: FdmMethod::Exact, alpha: 0.5, blocks: vec![1, 2], style_seed: 0, style_repeats: 1 }
    }
}

impl FdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(GnlError::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.blocks.iter().any(|b| !(1..=3).contains(b)) {
            return Err(GnlError::Config(format!("blocks must be within 1..=3, got {:?}", self.blocks)));
        }
        if self.style_repeats == 0 {
            return Err(GnlError::Config("style_repeats must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GnlError::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Exact feature distribution matching, per channel over the flattened
/// spatial positions.
///
/// Sort the content values ascending (permutation tau) and the style values
/// ascending, mix the sorted sequences as `(1 - alpha) * c + alpha * v`, and
/// scatter the mixed values back to the content's original positions.
/// Sorting is stable by (value, original index), so ties are deterministic.
/// `alpha = 0` returns the content bitwise.
pub fn efdm_match<F: Scalar>(
    content: &FeatureMap<F>,
    style: &FeatureMap<F>,
    alpha: f64,
) -> Result<FeatureMap<F>> {
    check_same_shape("efdm_match", content, style)?;
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(content.clone());
    }
    let (c, h, w) = content.dim();
    let n = h * w;
    let a = F::from_f64_lossy(alpha);
    let mut out = content.clone();
    let mut content_order: Vec<usize> = Vec::with_capacity(n);
    let mut style_sorted: Vec<F> = Vec::with_capacity(n);
    for ch in 0..c {
        let content_flat: Vec<F> = content.index_axis(ndarray::Axis(0), ch).iter().copied().collect();
        style_sorted.clear();
        style_sorted.extend(style.index_axis(ndarray::Axis(0), ch).iter().copied());
        style_sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite feature values"));

        content_order.clear();
        content_order.extend(0..n);
        // Stable sort by value keeps the (value, index) tie rule.
        content_order.sort_by(|&i, &j| {
            content_flat[i].partial_cmp(&content_flat[j]).expect("finite feature values")
        });

        for (rank, &pos) in content_order.iter().enumerate() {
            // (1-a)c + a v, written as c + a(v - c) so matching against an
            // identical style is exact and rounding cannot leak through the
            // recursive encoder stages.
            let cv = content_flat[pos];
            let mixed = if alpha == 1.0 { style_sorted[rank] } else { cv + a * (style_sorted[rank] - cv) };
            out[[ch, pos / w, pos % w]] = mixed;
        }
    }
    Ok(out)
}

/// Floor applied to the per-channel standard deviation.
pub const MOMENT_EPS: f64 = 1e-6;

/// Gaussian moment matching: renormalize each content channel to an
/// interpolated mean and standard deviation.
pub fn moment_match<F: Scalar>(
    content: &FeatureMap<F>,
    style: &FeatureMap<F>,
    alpha: f64,
) -> Result<FeatureMap<F>> {
    check_same_shape("moment_match", content, style)?;
    check_alpha(alpha)?;
    let (c, h, w) = content.dim();
    let n = (h * w) as f64;
    let mut out = content.clone();
    for ch in 0..c {
        let stats = |map: &FeatureMap<F>| -> (f64, f64) {
            let channel = map.index_axis(ndarray::Axis(0), ch);
            let mean = channel.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
            let var = channel.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt().max(MOMENT_EPS))
        };
        let (mu_c, sd_c) = stats(content);
        let (mu_s, sd_s) = stats(style);
        let mixed_mu = mu_c + alpha * (mu_s - mu_c);
        let mixed_sd = sd_c + alpha * (sd_s - sd_c);
        // mixed_sd z + mixed_mu, written as v + (ratio-1)(v - mu_c) + dmu so
        // an identical style leaves the content bitwise untouched.
        let ratio_minus_1 = mixed_sd / sd_c - 1.0;
        let dmu = mixed_mu - mu_c;
        for v in out.index_axis_mut(ndarray::Axis(0), ch).iter_mut() {
            let vf = v.to_f64_lossy();
            *v = F::from_f64_lossy(vf + ratio_minus_1 * (vf - mu_c) + dmu);
        }
    }
    Ok(out)
}

fn match_features<F: Scalar>(
    method: FdmMethod,
    content: &FeatureMap<F>,
    style: &FeatureMap<F>,
    alpha: f64,
) -> Result<FeatureMap<F>> {
    match method {
        FdmMethod::Exact => efdm_match(content, style, alpha),
        FdmMethod::Moment => moment_match(content, style, alpha),
    }
}

/// Test-time augmented encoding. The style image is encoded unmodified; the
/// test image's features are pulled toward the style's distribution after
/// each configured encoder block:
///
/// ```text
/// Q^m     = E^m(Q^{m-1})                       (style path)
/// P^m     = FDM(E^m(P^{m-1}), Q^m, alpha)      (content path, matched blocks)
/// ```
///
/// By default matching applies after blocks 1 and 2 only; the returned
/// pyramid feeds the bottleneck, decoder and scoring exactly like a plain
/// encoding.
pub fn tta_encode<F: Scalar>(
    test_image: &ImageTensor<F>,
    style_image: &ImageTensor<F>,
    cfg: &FdmConfig,
    bundle: &ModelBundle<F>,
) -> Result<(FeatureMap<F>, FeatureMap<F>, FeatureMap<F>)> {
    cfg.validate()?;
    let matched = |block: usize| cfg.blocks.contains(&block);

    let mut style_feat: Option<Array3<F>> = None;
    let mut p = encode_stage(bundle, 1, test_image.data());
    if matched(1) || matched(2) || matched(3) {
        style_feat = Some(encode_stage(bundle, 1, style_image.data()));
    }
    if matched(1) {
        p = match_features(cfg.method, &p, style_feat.as_ref().expect("style path"), cfg.alpha)?;
    }
    let p1 = p.clone();

    let mut p = encode_stage(bundle, 2, &p);
    if matched(2) || matched(3) {
        let q = encode_stage(bundle, 2, style_feat.as_ref().expect("style path"));
        if matched(2) {
            p = match_features(cfg.method, &p, &q, cfg.alpha)?;
        }
        style_feat = Some(q);
    }
    let p2 = p.clone();

    let mut p3 = encode_stage(bundle, 3, &p);
    if matched(3) {
        let q = encode_stage(bundle, 3, style_feat.as_ref().expect("style path"));
        p3 = match_features(cfg.method, &p3, &q, cfg.alpha)?;
    }
    Ok((p1, p2, p3))
}
