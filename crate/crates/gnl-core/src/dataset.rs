//! Dataset plumbing: the manifest adapter (a CSV listing of image path,
//! class, split), 8-bit image loading, and the synthetic blob/stripe dataset
//! used by the desk-scale benchmark.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GnlError, Result};
use crate::eval::{ClassifiedImage, Split};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub class: String,
    pub split: Split,
}

/// A dataset description: image files live relative to `root`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(GnlError::Format(format!("unknown split '{other}' (expected train/test)"))),
        }
    }
}

impl DatasetManifest {
    /// Reads a `path,class,split` CSV and verifies the invariants: every
    /// listed file exists, class names are non-empty, both splits non-empty.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut reader = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let headers = reader
            .headers()
            .map_err(|e| GnlError::Format(format!("manifest header: {e}")))?
            .clone();
        if headers.iter().ne(["path", "class", "split"]) {
            return Err(GnlError::Format(format!(
                "manifest must have header path,class,split, got {headers:?}"
            )));
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| GnlError::Format(format!("manifest row: {e}")))?;
            let rel = record.get(0).unwrap_or("").to_string();
            let class = record.get(1).unwrap_or("").to_string();
            let split = Split::parse(record.get(2).unwrap_or(""))?;
            if class.is_empty() {
                return Err(GnlError::Format(format!("empty class name for '{rel}'")));
            }
            if !root.join(&rel).is_file() {
                return Err(GnlError::Format(format!("listed file missing: {rel}")));
            }
            entries.push(ManifestEntry { path: rel, class, split });
        }
        let manifest = Self { root, entries };
        manifest.check_splits()?;
        Ok(manifest)
    }

    fn check_splits(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(GnlError::Format("manifest lists no images".into()));
        }
        for split in [Split::Train, Split::Test] {
            if !self.entries.iter().any(|e| e.split == split) {
                return Err(GnlError::Format(format!("manifest has an empty {} split", split.name())));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "path,class,split")?;
        for e in &self.entries {
            writeln!(w, "{},{},{}", e.path, e.class, e.split.name())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads every listed image.
    pub fn load_images(&self) -> Result<Vec<ClassifiedImage>> {
        self.entries
            .iter()
            .map(|e| {
                Ok(ClassifiedImage {
                    image: load_image(self.root.join(&e.path))?,
                    class: e.class.clone(),
                    split: e.split.clone(),
                    id: e.path.clone(),
                })
            })
            .collect()
    }

    /// Training-pool images of one class (the style pool for TTA).
    pub fn train_images_of_class(&self, class: &str) -> Result<Vec<ImageTensor<f32>>> {
        let mut out = Vec::new();
        for e in &self.entries {
            if e.split == Split::Train && e.class == class {
                out.push(load_image(self.root.join(&e.path))?);
            }
        }
        if out.is_empty() {
            return Err(GnlError::Config(format!("no train images of class '{class}'")));
        }
        Ok(out)
    }
}

/// Loads an 8-bit PNG or PPM/PGM image as floats in [0, 1]; grayscale maps
/// to one channel, everything else to RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| GnlError::Format(format!("cannot read image {}: {e}", path.display())))?;
    let data = match img {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = gray.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, i, j)| {
                gray.get_pixel(j as u32, i as u32)[0] as f32 / 255.0
            })
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
                rgb.get_pixel(j as u32, i as u32)[c] as f32 / 255.0
            })
        }
    };
    ImageTensor::new(data)
}

/// Writes an image as an 8-bit binary PPM (3 channels) or PGM (1 channel).
pub fn save_image(image: &ImageTensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = image.data().dim();
    let to_u8 = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    if c == 3 {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                let px = [
                    to_u8(image.data()[[0, i, j]]),
                    to_u8(image.data()[[1, i, j]]),
                    to_u8(image.data()[[2, i, j]]),
                ];
                img.put_pixel(j as u32, i as u32, image::Rgb(px));
            }
        }
        img.save(path).map_err(|e| GnlError::Format(format!("cannot write {}: {e}", path.display())))
    } else {
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for i in 0..h {
            for j in 0..w {
                img.put_pixel(j as u32, i as u32, image::Luma([to_u8(image.data()[[0, i, j]])]));
            }
        }
        img.save(path).map_err(|e| GnlError::Format(format!("cannot write {}: {e}", path.display())))
    }
}

/// Per-channel brightness offsets applied to the test split to form the
/// built-in OOD suite of the synthetic dataset: a colored lighting change,
/// strong enough that a plain detector degrades visibly under the shift.
pub const SYNTH_OOD_BRIGHTNESS: [f32; 3] = [0.32, 0.10, -0.22];

const SYNTH_SIZE: usize = 32;

fn synth_background(rng: &mut ChaCha8Rng) -> Array3<f32> {
    let base: [f32; 3] = [
        rng.gen_range(0.35..0.55),
        rng.gen_range(0.35..0.55),
        rng.gen_range(0.35..0.55),
    ];
    let fy = rng.gen_range(1..3) as f32;
    let fx = rng.gen_range(1..3) as f32;
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let amp = rng.gen_range(0.02..0.06);
    let mut data = Array3::zeros((3, SYNTH_SIZE, SYNTH_SIZE));
    for c in 0..3 {
        for i in 0..SYNTH_SIZE {
            for j in 0..SYNTH_SIZE {
                let t = amp
                    * (std::f32::consts::TAU * (fy * i as f32 + fx * j as f32) / SYNTH_SIZE as f32 + phase)
                        .sin();
                let noise = rng.gen_range(-0.02..0.02);
                data[[c, i, j]] = (base[c] + t + noise).clamp(0.0, 1.0);
            }
        }
    }
    data
}

fn add_blobs(data: &mut Array3<f32>, rng: &mut ChaCha8Rng) {
    let n_blobs = rng.gen_range(1..=2);
    for _ in 0..n_blobs {
        let cy = rng.gen_range(8.0..24.0f32);
        let cx = rng.gen_range(8.0..24.0f32);
        let sigma = rng.gen_range(2.5..5.0f32);
        let amp = rng.gen_range(0.25..0.45f32);
        let tint: [f32; 3] = [rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0), rng.gen_range(0.8..1.0)];
        for c in 0..3 {
            for i in 0..SYNTH_SIZE {
                for j in 0..SYNTH_SIZE {
                    let d2 = (i as f32 - cy).powi(2) + (j as f32 - cx).powi(2);
                    let bump = amp * tint[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                    data[[c, i, j]] = (data[[c, i, j]] + bump).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn add_stripes(data: &mut Array3<f32>, rng: &mut ChaCha8Rng) {
    let cy = rng.gen_range(10.0..22.0f32);
    let cx = rng.gen_range(10.0..22.0f32);
    let radius = rng.gen_range(6.0..10.0f32);
    let theta = rng.gen_range(0.0..std::f32::consts::PI);
    let wavelength = rng.gen_range(3.0..6.0f32);
    let amp = rng.gen_range(0.2..0.35f32);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    let (sin_t, cos_t) = theta.sin_cos();
    for c in 0..3 {
        for i in 0..SYNTH_SIZE {
            for j in 0..SYNTH_SIZE {
                let d2 = (i as f32 - cy).powi(2) + (j as f32 - cx).powi(2);
                let mask = (-d2 / (2.0 * radius * radius)).exp();
                let coord = cos_t * i as f32 + sin_t * j as f32;
                let stripe = amp * (std::f32::consts::TAU * coord / wavelength + phase).sin();
                data[[c, i, j]] = (data[[c, i, j]] + mask * stripe).clamp(0.0, 1.0);
            }
        }
    }
}

/// Generates the two-class synthetic dataset: "normal" soft blobs and
/// "anomaly" oriented stripe patches on textured backgrounds, plus a
/// brightness-shifted copy of the test split under `ood/` as a built-in
/// distribution-shift suite. Returns the ID manifest and the OOD manifest
/// (written as `manifest.csv` and `manifest_ood.csv`).
pub fn generate_synthetic(
    out_dir: impl AsRef<Path>,
    seed: u64,
    n_per_class: usize,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if n_per_class == 0 {
        return Err(GnlError::Config("n_per_class must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir.join("ood"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut ood_entries = Vec::new();

    let emit = |name: &str,
                class: &str,
                    split: Split,
                    data: Array3<f32>,
                    entries: &mut Vec<ManifestEntry>,
                    ood_entries: &mut Vec<ManifestEntry>|
     -> Result<()> {
        let image = ImageTensor::new(data)?;
        save_image(&image, out_dir.join(name))?;
        entries.push(ManifestEntry { path: name.into(), class: class.into(), split: split.clone() });
        if split == Split::Test {
            let mut shifted = image.data().clone();
            for (c, plane) in shifted.outer_iter_mut().enumerate() {
                let offset = SYNTH_OOD_BRIGHTNESS[c];
                for v in plane {
                    *v = (*v + offset).clamp(0.0, 1.0);
                }
            }
            let ood_name = format!("ood/{name}");
            save_image(&ImageTensor::new(shifted)?, out_dir.join(&ood_name))?;
            ood_entries.push(ManifestEntry { path: ood_name, class: class.into(), split: Split::Test });
        }
        Ok(())
    };

    // Train: normals only. Test: normals and anomalies, n_per_class each.
    for k in 0..n_per_class {
        let mut data = synth_background(&mut rng);
        add_blobs(&mut data, &mut rng);
        emit(&format!("train_normal_{k:04}.ppm"), "normal", Split::Train, data, &mut entries, &mut ood_entries)?;
    }
    for k in 0..n_per_class {
        let mut data = synth_background(&mut rng);
        add_blobs(&mut data, &mut rng);
        emit(&format!("test_normal_{k:04}.ppm"), "normal", Split::Test, data, &mut entries, &mut ood_entries)?;
    }
    for k in 0..n_per_class {
        let mut data = synth_background(&mut rng);
        add_stripes(&mut data, &mut rng);
        emit(&format!("test_anomaly_{k:04}.ppm"), "anomaly", Split::Test, data, &mut entries, &mut ood_entries)?;
    }

    let manifest = DatasetManifest { root: out_dir.to_path_buf(), entries };
    manifest.save(out_dir.join("manifest.csv"))?;
    // The OOD manifest lists shifted test images only; it reuses the ID
    // train split implicitly (training never reads it).
    let ood_manifest = DatasetManifest { root: out_dir.to_path_buf(), entries: ood_entries };
    {
        let mut w = BufWriter::new(File::create(out_dir.join("manifest_ood.csv"))?);
        writeln!(w, "path,class,split")?;
        for e in &ood_manifest.entries {
            writeln!(w, "{},{},{}", e.path, e.class, e.split.name())?;
        }
        w.flush()?;
    }
    Ok((manifest, ood_manifest))
}
