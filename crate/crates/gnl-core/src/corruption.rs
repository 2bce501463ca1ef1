//! The four-corruption OOD benchmark suite: brightness, contrast, defocus
//! blur, gaussian noise. Each corruption is a pure function of
//! (image, kind, severity, seed); severity tables span mild to severe at
//! desk resolution and are monotone in mean squared deviation from the
//! clean image.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{GnlError, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Brightness,
    Contrast,
    DefocusBlur,
    GaussianNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GaussianNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GaussianNoise => "gaussian_noise",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| GnlError::Config(format!("unknown corruption kind '{name}'")))
    }
}

/// Additive brightness offsets per severity 1-5.
pub const BRIGHTNESS_OFFSET: [f32; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
/// Scale-about-mean contrast factors per severity 1-5.
pub const CONTRAST_FACTOR: [f32; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
/// Defocus disc radii in pixels per severity 1-5.
pub const BLUR_RADIUS: [usize; 5] = [1, 2, 3, 4, 6];
/// Gaussian noise sigma (image range [0,1]) per severity 1-5.
pub const NOISE_SIGMA: [f32; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    /// Consumed only by gaussian noise.
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(GnlError::Config(format!(
                "corruption severity must be 1-5, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    pub fn suite_name(&self) -> String {
        format!("{}_s{}", self.kind.name(), self.severity)
    }
}

fn table<T: Copy + Default>(table: &[T; 5], severity: u8) -> T {
    // Severity 0 is the identity row, reachable only from tests.
    if severity == 0 {
        T::default()
    } else {
        table[(severity as usize - 1).min(4)]
    }
}

fn brightness(data: &Array3<f32>, offset: f32) -> Array3<f32> {
    data.mapv(|v| (v + offset).clamp(0.0, 1.0))
}

fn contrast(data: &Array3<f32>, factor: f32) -> Array3<f32> {
    let mut out = data.clone();
    let c = data.dim().0;
    for ch in 0..c {
        let channel = data.index_axis(ndarray::Axis(0), ch);
        let mean = channel.sum() / channel.len() as f32;
        for v in out.index_axis_mut(ndarray::Axis(0), ch).iter_mut() {
            *v = ((*v - mean) * factor + mean).clamp(0.0, 1.0);
        }
    }
    out
}

/// Symmetric reflection of `i` into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i.clamp(0, n - 1) as usize
}

/// Normalized disc (averaging) kernel of the given radius, reflect padding.
/// Constant images are fixed points.
fn defocus_blur(data: &Array3<f32>, radius: usize) -> Array3<f32> {
    if radius == 0 {
        return data.clone();
    }
    let r = radius as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                offsets.push((dy, dx));
            }
        }
    }
    let norm = 1.0 / offsets.len() as f32;
    let (c, h, w) = data.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        let src = data.index_axis(ndarray::Axis(0), ch);
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for &(dy, dx) in &offsets {
                    acc += src[[reflect(i as i64 + dy, h), reflect(j as i64 + dx, w)]];
                }
                out[[ch, i, j]] = (acc * norm).clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn gaussian_noise(data: &Array3<f32>, sigma: f32, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.mapv(|v| {
        let n: f64 = StandardNormal.sample(&mut rng);
        (v + sigma * n as f32).clamp(0.0, 1.0)
    })
}

/// Applies the corruption described by `spec`. Deterministic given
/// (image, spec), including the seed for gaussian noise.
pub fn corrupt(image: &ImageTensor, spec: &CorruptionSpec) -> Result<ImageTensor> {
    let out = match spec.kind {
        CorruptionKind::Brightness => brightness(image.data(), table(&BRIGHTNESS_OFFSET, spec.severity)),
        CorruptionKind::Contrast => {
            // Severity 0 must be the identity: factor 1, not Default = 0.
            let f = if spec.severity == 0 { 1.0 } else { table(&CONTRAST_FACTOR, spec.severity) };
            contrast(image.data(), f)
        }
        CorruptionKind::DefocusBlur => defocus_blur(image.data(), table(&BLUR_RADIUS, spec.severity)),
        CorruptionKind::GaussianNoise => {
            gaussian_noise(image.data(), table(&NOISE_SIGMA, spec.severity), spec.seed)
        }
    };
    Ok(ImageTensor::from_valid(out))
}

/// Mean squared deviation between an image and its corrupted copy; the
/// monotonicity oracle for the severity tables.
pub fn mean_squared_deviation(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc / a.data().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn textured_image(seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Low-frequency base so blur has something to smooth.
        let base = Array3::from_shape_fn((3, 8, 8), |_| rng.gen_range(0.1..0.9f32));
        let data = Array3::from_shape_fn((3, 32, 32), |(c, i, j)| {
            let v: f32 = base[[c, i / 4, j / 4]] + rng.gen_range(-0.05..0.05f32);
            v.clamp(0.0, 1.0)
        });
        ImageTensor::new(data).unwrap()
    }

    #[test]
    fn brightness_zero_offset_is_identity() {
        let img = textured_image(1);
        let spec = CorruptionSpec { kind: CorruptionKind::Brightness, severity: 0, seed: 0 };
        let out = corrupt(&img, &spec).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn contrast_zero_severity_is_identity() {
        let img = textured_image(2);
        let spec = CorruptionSpec { kind: CorruptionKind::Contrast, severity: 0, seed: 0 };
        let out = corrupt(&img, &spec).unwrap();
        for (a, b) in img.data().iter().zip(out.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_fixes_constant_images() {
        let img = ImageTensor::new(Array3::from_elem((3, 32, 32), 0.42)).unwrap();
        for severity in 1..=5u8 {
            let spec = CorruptionSpec { kind: CorruptionKind::DefocusBlur, severity, seed: 0 };
            let out = corrupt(&img, &spec).unwrap();
            for v in out.data().iter() {
                assert!((v - 0.42).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_noise_is_seeded_and_strictly_monotone() {
        let img = textured_image(3);
        let spec = CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity: 3, seed: 11 };
        let a = corrupt(&img, &spec).unwrap();
        let b = corrupt(&img, &spec).unwrap();
        assert_eq!(a.data(), b.data());

        let mut last = 0.0;
        for severity in 1..=5u8 {
            let spec = CorruptionSpec { kind: CorruptionKind::GaussianNoise, severity, seed: 11 };
            let out = corrupt(&img, &spec).unwrap();
            let msd = mean_squared_deviation(&img, &out);
            assert!(msd > last, "noise MSD must strictly increase: {msd} after {last}");
            last = msd;
        }
    }

    #[test]
    fn all_kinds_monotone_on_probe() {
        for kind in CorruptionKind::ALL {
            for probe_seed in 0..4u64 {
                let img = textured_image(probe_seed);
                let mut last = -1.0;
                for severity in 1..=5u8 {
                    let spec = CorruptionSpec { kind, severity, seed: 7 };
                    let out = corrupt(&img, &spec).unwrap();
                    let msd = mean_squared_deviation(&img, &out);
                    assert!(
                        msd >= last,
                        "{} severity {severity}: MSD {msd} < previous {last}",
                        kind.name()
                    );
                    last = msd;
                }
            }
        }
    }

    #[test]
    fn unknown_kind_name_rejected() {
        assert!(CorruptionKind::parse("fog").is_err());
        assert_eq!(CorruptionKind::parse("defocus_blur").unwrap(), CorruptionKind::DefocusBlur);
    }

    #[test]
    fn severity_bounds_validated() {
        let spec = CorruptionSpec { kind: CorruptionKind::Brightness, severity: 6, seed: 0 };
        assert!(spec.validate().is_err());
    }
}
