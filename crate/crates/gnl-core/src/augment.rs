//! Normality-preserving AugMix-style augmentation.
//!
//! Chains of photometric/rotation primitives are mixed with Dirichlet
//! weights and blended with the original image. The geometric shear and
//! translate primitives are excluded: on one-class data they can turn a
//! normal sample into a structural anomaly.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GnlError, Result};
use crate::tensor::ImageTensor;

/// Primitive names recognized by the augmentation pipeline. The geometric
/// four are permanently excluded from sampling and rejected by
/// [`apply_primitive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugOp {
    AutoContrast,
    Equalize,
    Posterize,
    Rotate,
    Solarize,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl AugOp {
    pub const ALL: [AugOp; 9] = [
        AugOp::AutoContrast,
        AugOp::Equalize,
        AugOp::Posterize,
        AugOp::Rotate,
        AugOp::Solarize,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
    ];

    /// The four removals that could generate anomalies.
    pub const GEOMETRIC_EXCLUSIONS: [AugOp; 4] =
        [AugOp::ShearX, AugOp::ShearY, AugOp::TranslateX, AugOp::TranslateY];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::AutoContrast => "autocontrast",
            AugOp::Equalize => "equalize",
            AugOp::Posterize => "posterize",
            AugOp::Rotate => "rotate",
            AugOp::Solarize => "solarize",
            AugOp::ShearX => "shear_x",
            AugOp::ShearY => "shear_y",
            AugOp::TranslateX => "translate_x",
            AugOp::TranslateY => "translate_y",
        }
    }

    pub fn parse(name: &str) -> Result<AugOp> {
        Self::ALL
            .into_iter()
            .find(|op| op.name() == name)
            .ok_or_else(|| GnlError::Config(format!("unknown augmentation op '{name}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Severity 1-5 scaling the primitive magnitudes.
    pub severity: u8,
    /// Number of mixed chains.
    pub width: usize,
    /// Chain depth is drawn uniformly from `1..=depth_max`.
    pub depth_max: usize,
    /// Op names removed from sampling; must contain the geometric four.
    pub exclude_ops: Vec<String>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            severity: 3,
            width: 3,
            depth_max: 3,
            exclude_ops: AugOp::GEOMETRIC_EXCLUSIONS.iter().map(|op| op.name().to_string()).collect(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(GnlError::Config(format!("augment severity must be 1-5, got {}", self.severity)));
        }
        if self.width < 1 || self.depth_max < 1 {
            return Err(GnlError::Config("augment width and depth_max must be >= 1".into()));
        }
        for name in &self.exclude_ops {
            AugOp::parse(name)?;
        }
        for required in AugOp::GEOMETRIC_EXCLUSIONS {
            if !self.exclude_ops.iter().any(|n| n == required.name()) {
                return Err(GnlError::Config(format!(
                    "exclude_ops must contain '{}' (normality-preserving removal)",
                    required.name()
                )));
            }
        }
        if self.sampled_ops()?.is_empty() {
            return Err(GnlError::Config("exclude_ops leaves no augmentation ops to sample".into()));
        }
        Ok(())
    }

    /// Additionally removes the contrast-remapping primitives
    /// (autocontrast, equalize). Used when the evaluation suite contains
    /// brightness/contrast corruptions that these would overlap with.
    pub fn without_photometric_overlap(mut self) -> Self {
        for op in [AugOp::AutoContrast, AugOp::Equalize] {
            if !self.exclude_ops.iter().any(|n| n == op.name()) {
                self.exclude_ops.push(op.name().to_string());
            }
        }
        self
    }

    fn sampled_ops(&self) -> Result<Vec<AugOp>> {
        let mut excluded = Vec::with_capacity(self.exclude_ops.len());
        for name in &self.exclude_ops {
            excluded.push(AugOp::parse(name)?);
        }
        Ok(AugOp::ALL
            .into_iter()
            .filter(|op| !excluded.contains(op) && !AugOp::GEOMETRIC_EXCLUSIONS.contains(op))
            .collect())
    }
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

fn autocontrast(data: &Array3<f32>) -> Array3<f32> {
    let mut out = data.clone();
    let (c, _, _) = data.dim();
    for ch in 0..c {
        let channel = data.index_axis(ndarray::Axis(0), ch);
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in channel.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let scale = 1.0 / (hi - lo);
            for v in out.index_axis_mut(ndarray::Axis(0), ch).iter_mut() {
                *v = clamp01((*v - lo) * scale);
            }
        }
    }
    out
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Classic 256-bin histogram equalization, applied per channel.
fn equalize(data: &Array3<f32>) -> Array3<f32> {
    let mut out = data.clone();
    let (c, _, _) = data.dim();
    for ch in 0..c {
        let channel = data.index_axis(ndarray::Axis(0), ch);
        let mut hist = [0u64; 256];
        for &v in channel.iter() {
            hist[to_u8(v) as usize] += 1;
        }
        let total: u64 = hist.iter().sum();
        let step = (total - hist[255]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, entry) in lut.iter_mut().enumerate() {
            *entry = ((n / step).min(255)) as u8;
            n += hist[i];
        }
        for v in out.index_axis_mut(ndarray::Axis(0), ch).iter_mut() {
            *v = lut[to_u8(*v) as usize] as f32 / 255.0;
        }
    }
    out
}

/// Keeps the top `8 - severity` bits of each 8-bit quantized value.
fn posterize(data: &Array3<f32>, severity: u8) -> Array3<f32> {
    let mask: u8 = 0xFFu8 << severity.min(7);
    data.mapv(|v| (to_u8(v) & mask) as f32 / 255.0)
}

/// Inverts values at or above `1 - severity / 10`.
fn solarize(data: &Array3<f32>, severity: u8) -> Array3<f32> {
    let threshold = 1.0 - severity as f32 / 10.0;
    data.mapv(|v| if v >= threshold { 1.0 - v } else { v })
}

/// Bilinear sample with clamp-to-edge fill.
fn sample_bilinear(channel: &ndarray::ArrayView2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = channel.dim();
    let clamp_y = |i: i64| i.clamp(0, h as i64 - 1) as usize;
    let clamp_x = |j: i64| j.clamp(0, w as i64 - 1) as usize;
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (iy, ix) = (y0 as i64, x0 as i64);
    let v00 = channel[[clamp_y(iy), clamp_x(ix)]];
    let v01 = channel[[clamp_y(iy), clamp_x(ix + 1)]];
    let v10 = channel[[clamp_y(iy + 1), clamp_x(ix)]];
    let v11 = channel[[clamp_y(iy + 1), clamp_x(ix + 1)]];
    let top = v00 * (1.0 - fx) + v01 * fx;
    let bot = v10 * (1.0 - fx) + v11 * fx;
    top * (1.0 - fy) + bot * fy
}

/// Rotation about the image center, bilinear resampling, edge fill.
fn rotate(data: &Array3<f32>, degrees: f32) -> Array3<f32> {
    let (c, h, w) = data.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let src = data.index_axis(ndarray::Axis(0), ch);
        for i in 0..h {
            for j in 0..w {
                // Inverse mapping: rotate output coords back into the source.
                let dy = i as f32 - cy;
                let dx = j as f32 - cx;
                let sy = cy + dy * cos - dx * sin;
                let sx = cx + dy * sin + dx * cos;
                out[[ch, i, j]] = clamp01(sample_bilinear(&src, sy, sx));
            }
        }
    }
    out
}

/// Severity-scaled primitive. Rotation draws its magnitude from `rng`
/// (level uniform in `[0.1, severity]`, 3 degrees per level, random sign);
/// severity 0 maps to a zero-magnitude op for testing.
pub fn apply_primitive(
    image: &ImageTensor,
    op: AugOp,
    severity: u8,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    if AugOp::GEOMETRIC_EXCLUSIONS.contains(&op) {
        return Err(GnlError::Config(format!(
            "op '{}' is excluded: it can generate anomalies on one-class data",
            op.name()
        )));
    }
    let data = image.data();
    let out = match op {
        AugOp::AutoContrast => autocontrast(data),
        AugOp::Equalize => equalize(data),
        AugOp::Posterize => posterize(data, severity),
        AugOp::Solarize => solarize(data, severity),
        AugOp::Rotate => {
            let degrees = if severity == 0 {
                0.0
            } else {
                let level = rng.gen_range(0.1..severity as f32);
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                sign * level * 3.0
            };
            rotate(data, degrees)
        }
        _ => unreachable!("geometric ops rejected above"),
    };
    Ok(ImageTensor::from_valid(out.mapv(clamp01)))
}

/// Dirichlet(1, ..., 1) weights via normalized exponentials. Hand-rolled so
/// the single-chain case yields exactly `[1.0]`.
fn dirichlet_ones(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let sum: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / sum).collect()
}

/// Standard AugMix mixing: `width` chains of `1..=depth_max` primitives,
/// combined convexly with Dirichlet(1,...,1) weights, then blended into the
/// original with a Beta(1,1) weight. Output clamped to `[0, 1]`.
pub fn augmix_normal(
    image: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImageTensor> {
    let ops = cfg.sampled_ops()?;
    if ops.is_empty() {
        return Err(GnlError::Config("no augmentation ops left to sample".into()));
    }
    let weights = dirichlet_ones(cfg.width.max(1), rng);
    let blend = rng.gen::<f64>() as f32; // Beta(1,1) == Uniform(0,1)

    let mut mix = Array3::<f32>::zeros(image.data().dim());
    for &w in &weights {
        let depth = if cfg.depth_max == 0 { 0 } else { rng.gen_range(1..=cfg.depth_max) };
        let mut chain = image.clone();
        for _ in 0..depth {
            let op = ops[rng.gen_range(0..ops.len())];
            chain = apply_primitive(&chain, op, cfg.severity, rng)?;
        }
        mix.scaled_add(w as f32, chain.data());
    }
    // out = x + m * (mix - x): exact identity when the chains are identity.
    let mut out = image.data().clone();
    ndarray::Zip::from(&mut out).and(&mix).for_each(|o, &m| {
        *o = clamp01(*o + blend * (m - *o));
    });
    Ok(ImageTensor::from_valid(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn test_image() -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((3, 32, 32), |(c, i, j)| {
            ((c * 53 + i * 17 + j * 5) % 101) as f32 / 100.0
        }))
        .unwrap()
    }

    #[test]
    fn excluded_geometric_op_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = apply_primitive(&test_image(), AugOp::ShearX, 3, &mut rng);
        assert!(matches!(err, Err(GnlError::Config(_))));
    }

    #[test]
    fn rotate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = test_image();
        let out = apply_primitive(&img, AugOp::Rotate, 0, &mut rng).unwrap();
        for (a, b) in img.data().iter().zip(out.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn posterize_is_idempotent_on_quantized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = test_image();
        let once = apply_primitive(&img, AugOp::Posterize, 3, &mut rng).unwrap();
        let twice = apply_primitive(&once, AugOp::Posterize, 3, &mut rng).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn solarize_inverts_above_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ImageTensor::new(Array3::from_elem((1, 16, 16), 0.9)).unwrap();
        let out = apply_primitive(&img, AugOp::Solarize, 3, &mut rng).unwrap();
        // threshold 0.7; 0.9 inverts to 0.1
        assert!((out.data()[[0, 0, 0]] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn empty_chain_is_exact_identity() {
        let cfg = AugmentConfig { width: 1, depth_max: 0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = test_image();
        let out = augmix_normal(&img, &cfg, &mut rng).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn output_in_unit_range_and_shape_preserved() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let img = test_image();
        for _ in 0..8 {
            let out = augmix_normal(&img, &cfg, &mut rng).unwrap();
            assert_eq!(out.data().dim(), img.data().dim());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn seeded_augmix_is_reproducible() {
        let cfg = AugmentConfig::default();
        let img = test_image();
        let mut rng1 = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut rng2 = ChaCha8Rng::seed_from_u64(cfg.seed);
        let a = augmix_normal(&img, &cfg, &mut rng1).unwrap();
        let b = augmix_normal(&img, &cfg, &mut rng2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn config_must_keep_geometric_exclusions() {
        let cfg = AugmentConfig { exclude_ops: vec!["shear_x".into()], ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(AugmentConfig::default().validate().is_ok());
        let mvtec = AugmentConfig::default().without_photometric_overlap();
        assert!(mvtec.validate().is_ok());
        let ops = mvtec.sampled_ops().unwrap();
        assert!(!ops.contains(&AugOp::AutoContrast) && !ops.contains(&AugOp::Equalize));
        assert!(ops.contains(&AugOp::Rotate));
    }

    #[test]
    fn dirichlet_weights_are_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = dirichlet_ones(3, &mut rng);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| *v >= 0.0));
        assert_eq!(dirichlet_ones(1, &mut rng), vec![1.0]);
    }
}
