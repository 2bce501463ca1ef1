//! Distribution-invariant normality losses: the cosine feature distance, the
//! base multi-scale distillation loss, the bottleneck/low-feature agreement
//! losses over augmented copies, and their weighted total.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{GnlError, Result};
use crate::tensor::{check_same_shape, FeatureMap, FeaturePyramid, ReconPyramid, Scalar};

/// Norm floor in the cosine denominator, defining the distance at zero
/// vectors.
pub const COSINE_EPS: f64 = 1e-8;

/// Weights of the three loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ori: f64,
    pub lambda_abs: f64,
    pub lambda_lowf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ori: 1.0, lambda_abs: 1.0, lambda_lowf: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_ori, self.lambda_abs, self.lambda_lowf];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GnlError::Config("loss weights must be finite and non-negative".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(GnlError::Config("loss weights must not all be zero".into()));
        }
        Ok(())
    }

    /// True when only the base distillation term is active; training then
    /// skips the augmentation machinery entirely.
    pub fn base_only(&self) -> bool {
        self.lambda_abs == 0.0 && self.lambda_lowf == 0.0
    }
}

/// The three loss components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_ori: f64,
    pub l_abs: f64,
    pub l_lowf: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l_ori.is_finite() && self.l_abs.is_finite() && self.l_lowf.is_finite() && self.total.is_finite()
    }
}

/// Mean over spatial positions of `1 - cos` between the channel vectors of
/// `a` and `b`. Range `[0, 2]`; the denominator is floored at [`COSINE_EPS`].
pub fn cosine_feature_loss<F: Scalar>(a: &FeatureMap<F>, b: &FeatureMap<F>) -> Result<f64> {
    check_same_shape("cosine_feature_loss", a, b)?;
    let (c, h, w) = a.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for ch in 0..c {
                let av = a[[ch, i, j]].to_f64_lossy();
                let bv = b[[ch, i, j]].to_f64_lossy();
                dot += av * bv;
                na += av * av;
                nb += bv * bv;
            }
            let denom = (na.sqrt() * nb.sqrt()).max(COSINE_EPS);
            total += 1.0 - dot / denom;
        }
    }
    Ok(total / (h * w) as f64)
}

/// Gradients of [`cosine_feature_loss`] with respect to both arguments,
/// scaled by `weight`. Used by the training loop; the clamped-denominator
/// branch treats the norms as constants.
pub(crate) fn cosine_feature_loss_backward<F: Scalar>(
    a: &FeatureMap<F>,
    b: &FeatureMap<F>,
    weight: f64,
) -> (Array3<F>, Array3<F>) {
    let (c, h, w) = a.dim();
    let mut ga = Array3::zeros((c, h, w));
    let mut gb = Array3::zeros((c, h, w));
    let scale = weight / (h * w) as f64;
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0;
            let mut na2 = 0.0;
            let mut nb2 = 0.0;
            for ch in 0..c {
                let av = a[[ch, i, j]].to_f64_lossy();
                let bv = b[[ch, i, j]].to_f64_lossy();
                dot += av * bv;
                na2 += av * av;
                nb2 += bv * bv;
            }
            let na = na2.sqrt();
            let nb = nb2.sqrt();
            let prod = na * nb;
            if prod > COSINE_EPS {
                // d(1-cos)/da = -(b - (dot/na^2) a) / (na nb), same for b.
                for ch in 0..c {
                    let av = a[[ch, i, j]].to_f64_lossy();
                    let bv = b[[ch, i, j]].to_f64_lossy();
                    let da = -(bv - dot / na2 * av) / prod;
                    let db = -(av - dot / nb2 * bv) / prod;
                    ga[[ch, i, j]] = F::from_f64_lossy(scale * da);
                    gb[[ch, i, j]] = F::from_f64_lossy(scale * db);
                }
            } else {
                // Clamped denominator: cos = dot / eps.
                for ch in 0..c {
                    let av = a[[ch, i, j]].to_f64_lossy();
                    let bv = b[[ch, i, j]].to_f64_lossy();
                    ga[[ch, i, j]] = F::from_f64_lossy(-scale * bv / COSINE_EPS);
                    gb[[ch, i, j]] = F::from_f64_lossy(-scale * av / COSINE_EPS);
                }
            }
        }
    }
    (ga, gb)
}

/// Base distillation loss: sum of per-scale cosine losses between the teacher
/// pyramid and the decoder reconstruction.
pub fn loss_ori<F: Scalar>(pyr: &FeaturePyramid<F>, rec: &ReconPyramid<F>) -> Result<f64> {
    Ok(cosine_feature_loss(&pyr.p1, &rec.l1)?
        + cosine_feature_loss(&pyr.p2, &rec.l2)?
        + cosine_feature_loss(&pyr.p3, &rec.l3)?)
}

/// Mean cosine loss between the original bottleneck embedding and each
/// augmented copy's embedding.
pub fn loss_abs<F: Scalar>(bn_ori: &FeatureMap<F>, bn_augs: &[FeatureMap<F>]) -> Result<f64> {
    if bn_augs.is_empty() {
        return Err(GnlError::Config("loss_abs requires at least one augmented embedding".into()));
    }
    let mut total = 0.0;
    for bn_aug in bn_augs {
        total += cosine_feature_loss(bn_ori, bn_aug)?;
    }
    Ok(total / bn_augs.len() as f64)
}

/// Same aggregation as [`loss_abs`], applied at the decoder's final block.
pub fn loss_lowf<F: Scalar>(l1_ori: &FeatureMap<F>, l1_augs: &[FeatureMap<F>]) -> Result<f64> {
    if l1_augs.is_empty() {
        return Err(GnlError::Config("loss_lowf requires at least one augmented reconstruction".into()));
    }
    loss_abs(l1_ori, l1_augs)
}

/// Weighted total of the three components.
pub fn total_loss(l_ori: f64, l_abs: f64, l_lowf: f64, weights: &LossWeights) -> Result<LossReport> {
    let report = LossReport {
        l_ori,
        l_abs,
        l_lowf,
        total: weights.lambda_ori * l_ori + weights.lambda_abs * l_abs + weights.lambda_lowf * l_lowf,
    };
    if !report.is_finite() {
        return Err(GnlError::Numeric(format!("non-finite loss: {report:?}")));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr3, Array3};

    fn single_pos(v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((v.len(), 1, 1), v.to_vec()).unwrap()
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let a = arr3(&[[[0.5_f64, 1.0], [2.0, -1.0]], [[0.2, 0.1], [0.3, 0.4]]]);
        assert!(cosine_feature_loss(&a, &a).unwrap() < 1e-7);
    }

    #[test]
    fn orthogonal_vectors_give_one() {
        let a = single_pos(&[1.0, 0.0]);
        let b = single_pos(&[0.0, 1.0]);
        assert!((cosine_feature_loss(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antiparallel_vectors_give_two() {
        let a = single_pos(&[1.0, 0.0]);
        let b = single_pos(&[-1.0, 0.0]);
        assert!((cosine_feature_loss(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_and_scale_invariant() {
        let a = arr3(&[[[0.5_f64, 1.0]], [[0.2, -0.7]], [[0.9, 0.3]]]);
        let b = arr3(&[[[1.5_f64, -1.0]], [[0.1, 0.7]], [[-0.9, 0.2]]]);
        let ab = cosine_feature_loss(&a, &b).unwrap();
        let ba = cosine_feature_loss(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        let scaled = a.mapv(|v| v * 3.25);
        assert!(cosine_feature_loss(&a, &scaled).unwrap() < 1e-12);
    }

    #[test]
    fn zero_vectors_are_defined() {
        let a = single_pos(&[0.0, 0.0]);
        let b = single_pos(&[1.0, 0.0]);
        let l = cosine_feature_loss(&a, &b).unwrap();
        assert!(l.is_finite());
        assert!((l - 1.0).abs() < 1e-9, "zero against anything scores cos=0");
    }

    #[test]
    fn loss_abs_is_the_mean() {
        // Two aug embeddings at known cosine distances from the original.
        let ori = single_pos(&[1.0, 0.0]);
        let orth = single_pos(&[0.0, 1.0]); // loss 1.0
        let same = single_pos(&[2.0, 0.0]); // loss 0.0
        let l = loss_abs(&ori, &[orth, same]).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
        assert!(matches!(
            loss_abs::<f64>(&ori, &[]),
            Err(GnlError::Config(_))
        ));
    }

    #[test]
    fn total_is_weighted_sum() {
        let w = LossWeights::default();
        let r = total_loss(0.2, 0.3, 0.5, &w).unwrap();
        assert!((r.total - 1.0).abs() < 1e-9);
        let w2 = LossWeights { lambda_ori: 2.0, lambda_abs: 1.0, lambda_lowf: 1.0 };
        let r2 = total_loss(0.1, 0.1, 0.1, &w2).unwrap();
        assert!((r2.total - 0.4).abs() < 1e-9);
        let w3 = LossWeights { lambda_ori: 1.0, lambda_abs: 0.0, lambda_lowf: 0.0 };
        let r3 = total_loss(0.7, 0.9, 0.9, &w3).unwrap();
        assert!((r3.total - 0.7).abs() < 1e-12);
    }

    #[test]
    fn nan_component_is_a_numeric_error() {
        let w = LossWeights::default();
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.0, &w), Err(GnlError::Numeric(_))));
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let mut a = arr3(&[[[0.5_f64], [0.8]], [[0.2], [-0.7]], [[0.9], [0.1]]]);
        let b = arr3(&[[[1.5_f64], [0.3]], [[0.1], [0.4]], [[-0.9], [0.2]]]);
        let (ga, gb) = cosine_feature_loss_backward(&a, &b, 1.0);
        let h = 1e-6;
        for idx in [[0usize, 0, 0], [1, 1, 0], [2, 0, 0]] {
            let orig = a[idx];
            a[idx] = orig + h;
            let fp = cosine_feature_loss(&a, &b).unwrap();
            a[idx] = orig - h;
            let fm = cosine_feature_loss(&a, &b).unwrap();
            a[idx] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - ga[idx]).abs() < 1e-8, "ga mismatch at {idx:?}");
        }
        // Symmetry of the kernel: swap arguments, compare against gb.
        let (ga_swapped, _) = cosine_feature_loss_backward(&b, &a, 1.0);
        for (x, y) in gb.iter().zip(ga_swapped.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let zero = LossWeights { lambda_ori: 0.0, lambda_abs: 0.0, lambda_lowf: 0.0 };
        assert!(zero.validate().is_err());
        let neg = LossWeights { lambda_ori: -1.0, ..Default::default() };
        assert!(neg.validate().is_err());
    }
}
