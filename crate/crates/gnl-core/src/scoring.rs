//! Inference-time anomaly scoring: per-scale teacher/student disagreement
//! maps, bilinear accumulation into a full-resolution score map, and the
//! max-pixel image score. Test-time augmentation runs through the fdm
//! module when configured.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GnlError, Result};
use crate::fdm::{tta_encode, FdmConfig};
use crate::losses::COSINE_EPS;
use crate::model::{bottleneck_embed, decode, encode, ModelBundle};
use crate::tensor::{FeatureMap, FeaturePyramid, ImageTensor, ReconPyramid};

/// Pixel-wise anomaly score map matching the input image's spatial shape.
/// Values lie in `[0, 6]`: three accumulated maps, each in `[0, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    data: Array2<f32>,
}

impl ScoreMap {
    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Test-time augmentation; `None` scores the plain encoding.
    pub tta: Option<FdmConfig>,
    /// Gaussian smoothing of the accumulated map; 0 disables it.
    pub smoothing_sigma: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { tta: None, smoothing_sigma: 0.0 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smoothing_sigma < 0.0 || !self.smoothing_sigma.is_finite() {
            return Err(GnlError::Config("smoothing_sigma must be >= 0".into()));
        }
        if let Some(tta) = &self.tta {
            tta.validate()?;
        }
        Ok(())
    }
}

fn anomaly_map_single(p: &FeatureMap<f32>, l: &FeatureMap<f32>) -> Result<FeatureMap<f32>> {
    crate::tensor::check_same_shape("anomaly_map", p, l)?;
    let (c, h, w) = p.dim();
    let mut out = Array3::zeros((1, h, w));
    for i in 0..h {
        for j in 0..w {
            let mut dot = 0.0f64;
            let mut np = 0.0f64;
            let mut nl = 0.0f64;
            for ch in 0..c {
                let pv = p[[ch, i, j]] as f64;
                let lv = l[[ch, i, j]] as f64;
                dot += pv * lv;
                np += pv * pv;
                nl += lv * lv;
            }
            let denom = (np.sqrt() * nl.sqrt()).max(COSINE_EPS);
            out[[0, i, j]] = (1.0 - dot / denom) as f32;
        }
    }
    Ok(out)
}

/// Per-scale anomaly maps: at each position, one minus the cosine similarity
/// between teacher and reconstructed channel vectors. Values in `[0, 2]`.
pub fn anomaly_maps(
    pyr: &FeaturePyramid<f32>,
    rec: &ReconPyramid<f32>,
) -> Result<(FeatureMap<f32>, FeatureMap<f32>, FeatureMap<f32>)> {
    Ok((
        anomaly_map_single(&pyr.p1, &rec.l1)?,
        anomaly_map_single(&pyr.p2, &rec.l2)?,
        anomaly_map_single(&pyr.p3, &rec.l3)?,
    ))
}

/// Bilinear upsampling with the half-texel (align-corners = false)
/// convention: output pixel centers map to `(i + 0.5) * src / dst - 0.5` in
/// source coordinates, sampled with clamped edges. Written in delta form so
/// constant maps are reproduced exactly.
pub fn bilinear_upsample(map: &Array2<f32>, target_hw: (usize, usize)) -> Array2<f32> {
    let (sh, sw) = map.dim();
    let (th, tw) = target_hw;
    let mut out = Array2::zeros((th, tw));
    let sy = sh as f64 / th as f64;
    let sx = sw as f64 / tw as f64;
    for i in 0..th {
        let y = ((i as f64 + 0.5) * sy - 0.5).max(0.0).min(sh as f64 - 1.0);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = (y - y0 as f64) as f32;
        for j in 0..tw {
            let x = ((j as f64 + 0.5) * sx - 0.5).max(0.0).min(sw as f64 - 1.0);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = (x - x0 as f64) as f32;
            let v00 = map[[y0, x0]];
            let v01 = map[[y0, x1]];
            let v10 = map[[y1, x0]];
            let v11 = map[[y1, x1]];
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            out[[i, j]] = top + fy * (bot - top);
        }
    }
    out
}

fn gaussian_smooth(map: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        kernel.push((-(d * d) as f64 / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.into_iter().map(|k| (k / norm) as f32).collect();

    let (h, w) = map.dim();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut tmp = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f32;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * map[[i, reflect(j as i64 + k as i64 - radius, w)]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f32;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[reflect(i as i64 + k as i64 - radius, h), j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Upsamples each anomaly map to the image resolution, sums them pixel-wise,
/// and optionally smooths the sum.
pub fn score_map(
    maps: (&FeatureMap<f32>, &FeatureMap<f32>, &FeatureMap<f32>),
    target_hw: (usize, usize),
    smoothing_sigma: f64,
) -> Result<ScoreMap> {
    if target_hw.0 == 0 || target_hw.1 == 0 {
        return Err(GnlError::Shape("score map target must be non-empty".into()));
    }
    let mut acc = Array2::<f32>::zeros(target_hw);
    for map in [maps.0, maps.1, maps.2] {
        if map.dim().0 != 1 {
            return Err(GnlError::Shape(format!(
                "anomaly maps are single-channel, got {} channels",
                map.dim().0
            )));
        }
        let plane = map.index_axis(ndarray::Axis(0), 0).to_owned();
        acc = acc + bilinear_upsample(&plane, target_hw);
    }
    let acc = gaussian_smooth(&acc, smoothing_sigma);
    Ok(ScoreMap { data: acc })
}

/// Maximum pixel of the score map.
pub fn image_score(map: &ScoreMap) -> f32 {
    map.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

fn score_once(
    image: &ImageTensor<f32>,
    bundle: &ModelBundle<f32>,
    cfg: &InferenceConfig,
    style: Option<&ImageTensor<f32>>,
) -> Result<(f32, ScoreMap)> {
    let (p1, p2, p3) = match (&cfg.tta, style) {
        (Some(fdm), Some(style)) => tta_encode(image, style, fdm, bundle)?,
        _ => encode(image, bundle)?,
    };
    let bn = bottleneck_embed(&p1, &p2, &p3, bundle)?;
    let rec = decode(&bn, bundle)?;
    let pyr = FeaturePyramid { p1, p2, p3, bn };
    let maps = anomaly_maps(&pyr, &rec)?;
    let smap = score_map((&maps.0, &maps.1, &maps.2), (image.height(), image.width()), cfg.smoothing_sigma)?;
    Ok((image_score(&smap), smap))
}

/// Scores one image. With TTA enabled, a style sample is drawn uniformly
/// from the pool per repeat; scores and maps are averaged over repeats.
pub fn infer(
    image: &ImageTensor<f32>,
    bundle: &ModelBundle<f32>,
    cfg: &InferenceConfig,
    style_pool: &[ImageTensor<f32>],
    rng: &mut ChaCha8Rng,
) -> Result<(f32, ScoreMap)> {
    cfg.validate()?;
    let Some(tta) = &cfg.tta else {
        return score_once(image, bundle, cfg, None);
    };
    if style_pool.is_empty() {
        return Err(GnlError::Config("TTA requires a non-empty style pool".into()));
    }
    let repeats = tta.style_repeats.max(1);
    let mut score_sum = 0.0f64;
    let mut map_sum: Option<Array2<f32>> = None;
    for _ in 0..repeats {
        let style = &style_pool[rng.gen_range(0..style_pool.len())];
        let (score, smap) = score_once(image, bundle, cfg, Some(style))?;
        score_sum += score as f64;
        map_sum = Some(match map_sum {
            Some(acc) => acc + smap.data(),
            None => smap.data.clone(),
        });
    }
    let inv = 1.0 / repeats as f32;
    let data = map_sum.expect("at least one repeat") * inv;
    Ok(((score_sum / repeats as f64) as f32, ScoreMap { data }))
}

/// Derives an independent per-sample rng stream so scoring is
/// order-independent under a fixed run seed.
pub fn per_sample_rng(master_seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&sample_index.to_le_bytes());
    seed[16..24].copy_from_slice(b"gnlstyle");
    ChaCha8Rng::from_seed(seed)
}

pub const MAP_MAGIC: &[u8; 4] = b"GNLM";

/// Raw float map format: magic "GNLM", height and width as u32 LE, then
/// `h * w` little-endian f32 values in row-major order.
pub fn write_score_map(map: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = map.shape();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAP_MAGIC)?;
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for v in map.data.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| GnlError::Format("truncated score map".into()))?;
    if &magic != MAP_MAGIC {
        return Err(GnlError::Format(format!("bad score map magic {magic:?}")));
    }
    let mut dims = [0u8; 8];
    r.read_exact(&mut dims).map_err(|_| GnlError::Format("truncated score map".into()))?;
    let h = u32::from_le_bytes(dims[..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(dims[4..].try_into().unwrap()) as usize;
    let mut bytes = vec![0u8; 4 * h * w];
    r.read_exact(&mut bytes).map_err(|_| GnlError::Format("truncated score map".into()))?;
    let values: Vec<f32> =
        bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let data = Array2::from_shape_vec((h, w), values)
        .map_err(|e| GnlError::Format(format!("score map shape: {e}")))?;
    Ok(ScoreMap { data })
}

/// 8-bit grayscale heat image normalized to the map's own value range, for
/// quick inspection.
pub fn write_heat_image(map: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = map.shape();
    let lo = map.data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let v = ((map.data[[i, j]] - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(j as u32, i as u32, image::Luma([v]));
        }
    }
    img.save(path.as_ref())
        .map_err(|e| GnlError::Format(format!("cannot write heat image: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_model, ModelConfig};
    use ndarray::arr2;
    use rand::SeedableRng;

    fn test_image(seed: u64) -> ImageTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0f32))).unwrap()
    }

    #[test]
    fn perfect_reconstruction_gives_zero_maps() {
        let bundle = init_model::<f32>(&ModelConfig { seed: 8, ..Default::default() }).unwrap();
        let (pyr, _) = forward(&test_image(1), &bundle).unwrap();
        let rec = ReconPyramid { l1: pyr.p1.clone(), l2: pyr.p2.clone(), l3: pyr.p3.clone() };
        let (m1, m2, m3) = anomaly_maps(&pyr, &rec).unwrap();
        for m in [&m1, &m2, &m3] {
            assert!(m.iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn orthogonal_position_scores_one() {
        let p = Array3::from_shape_vec((2, 1, 1), vec![1.0, 0.0]).unwrap();
        let l = Array3::from_shape_vec((2, 1, 1), vec![0.0, 1.0]).unwrap();
        let m = anomaly_map_single(&p, &l).unwrap();
        assert!((m[[0, 0, 0]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn map_values_stay_in_cosine_range() {
        let bundle = init_model::<f32>(&ModelConfig { seed: 9, ..Default::default() }).unwrap();
        let (pyr, rec) = forward(&test_image(3), &bundle).unwrap();
        let (m1, m2, m3) = anomaly_maps(&pyr, &rec).unwrap();
        for m in [&m1, &m2, &m3] {
            assert!(m.iter().all(|v| (0.0..=2.0).contains(v)));
        }
    }

    #[test]
    fn bilinear_identity_at_same_resolution() {
        let src = arr2(&[[1.0f32, 2.0], [3.0, 4.0]]);
        let out = bilinear_upsample(&src, (2, 2));
        assert_eq!(out, src);
    }

    #[test]
    fn bilinear_matches_brute_force_oracle_2x2_to_4x4() {
        let src = arr2(&[[1.0f32, 2.0], [3.0, 4.0]]);
        let out = bilinear_upsample(&src, (4, 4));
        // Brute-force oracle at the half-texel grid with clamped edges.
        let oracle = |y: f64, x: f64| -> f64 {
            let yc = y.clamp(0.0, 1.0);
            let xc = x.clamp(0.0, 1.0);
            let y0 = yc.floor();
            let x0 = xc.floor();
            let fy = yc - y0;
            let fx = xc - x0;
            let at = |i: f64, j: f64| src[[i.min(1.0) as usize, j.min(1.0) as usize]] as f64;
            at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + at(y0, x0 + 1.0) * (1.0 - fy) * fx
                + at(y0 + 1.0, x0) * fy * (1.0 - fx)
                + at(y0 + 1.0, x0 + 1.0) * fy * fx
        };
        for i in 0..4 {
            for j in 0..4 {
                let y = (i as f64 + 0.5) * 0.5 - 0.5;
                let x = (j as f64 + 0.5) * 0.5 - 0.5;
                assert!(
                    (out[[i, j]] as f64 - oracle(y, x)).abs() < 1e-6,
                    "mismatch at ({i},{j})"
                );
            }
        }
        // The interpolant reproduces source values at source coordinates.
        for sy in 0..2 {
            for sx in 0..2 {
                assert!((oracle(sy as f64, sx as f64) - src[[sy, sx]] as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_maps_sum_exactly() {
        let m1 = Array3::from_elem((1, 2, 2), 0.25f32);
        let m2 = Array3::from_elem((1, 4, 4), 0.5f32);
        let m3 = Array3::from_elem((1, 8, 8), 0.125f32);
        let smap = score_map((&m1, &m2, &m3), (16, 16), 0.0).unwrap();
        for v in smap.data().iter() {
            assert_eq!(*v, 0.875);
        }
        assert_eq!(image_score(&smap), 0.875);
    }

    #[test]
    fn image_score_is_the_max_pixel() {
        let mut data = Array2::<f32>::zeros((4, 4));
        data[[2, 1]] = 3.0;
        let smap = ScoreMap { data };
        assert_eq!(image_score(&smap), 3.0);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let data = Array2::from_elem((8, 8), 1.5f32);
        let out = gaussian_smooth(&data, 2.0);
        for v in out.iter() {
            assert!((v - 1.5).abs() < 1e-5);
        }
    }

    #[test]
    fn tta_alpha_zero_bitwise_equals_plain_infer() {
        let bundle = init_model::<f32>(&ModelConfig { seed: 10, ..Default::default() }).unwrap();
        let img = test_image(5);
        let pool = vec![test_image(6), test_image(7)];
        let plain = infer(&img, &bundle, &InferenceConfig::default(), &[], &mut per_sample_rng(1, 0)).unwrap();
        let cfg = InferenceConfig {
            tta: Some(FdmConfig { alpha: 0.0, ..Default::default() }),
            smoothing_sigma: 0.0,
        };
        let tta = infer(&img, &bundle, &cfg, &pool, &mut per_sample_rng(1, 0)).unwrap();
        assert_eq!(plain.0, tta.0);
        assert_eq!(plain.1, tta.1);
    }

    #[test]
    fn tta_with_self_style_matches_plain_within_tolerance() {
        let bundle = init_model::<f32>(&ModelConfig { seed: 11, ..Default::default() }).unwrap();
        let img = test_image(8);
        let plain = infer(&img, &bundle, &InferenceConfig::default(), &[], &mut per_sample_rng(2, 0)).unwrap();
        let cfg = InferenceConfig {
            tta: Some(FdmConfig { alpha: 0.7, ..Default::default() }),
            smoothing_sigma: 0.0,
        };
        let forced_pool = vec![img.clone()];
        let tta = infer(&img, &bundle, &cfg, &forced_pool, &mut per_sample_rng(2, 0)).unwrap();
        assert!((plain.0 - tta.0).abs() < 1e-6);
    }

    #[test]
    fn tta_without_style_pool_is_a_config_error() {
        let bundle = init_model::<f32>(&ModelConfig { seed: 12, ..Default::default() }).unwrap();
        let cfg = InferenceConfig { tta: Some(FdmConfig::default()), smoothing_sigma: 0.0 };
        let err = infer(&test_image(9), &bundle, &cfg, &[], &mut per_sample_rng(3, 0));
        assert!(matches!(err, Err(GnlError::Config(_))));
    }

    #[test]
    fn pipeline_consistency_with_plain_infer() {
        let bundle = init_model::<f32>(&ModelConfig { seed: 13, ..Default::default() }).unwrap();
        let img = test_image(10);
        let (pyr, rec) = forward(&img, &bundle).unwrap();
        let maps = anomaly_maps(&pyr, &rec).unwrap();
        let smap = score_map((&maps.0, &maps.1, &maps.2), (32, 32), 0.0).unwrap();
        let direct = image_score(&smap);
        let (via_infer, via_map) =
            infer(&img, &bundle, &InferenceConfig::default(), &[], &mut per_sample_rng(4, 0)).unwrap();
        assert_eq!(direct, via_infer);
        assert_eq!(smap, via_map);
    }

    #[test]
    fn score_map_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.gnlm");
        let data = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f32 / 10.0);
        let smap = ScoreMap { data };
        write_score_map(&smap, &p).unwrap();
        let loaded = read_score_map(&p).unwrap();
        assert_eq!(loaded, smap);
        std::fs::write(&p, b"BAD!").unwrap();
        assert!(matches!(read_score_map(&p), Err(GnlError::Format(_))));
    }
}
