//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gnl_core::corruption::{corrupt, CorruptionKind, CorruptionSpec};
use gnl_core::dataset::{generate_synthetic, load_image, save_image, DatasetManifest};
use gnl_core::error::{GnlError, Result};
use gnl_core::eval::{auroc, benchmark, one_vs_all_split, score_histogram, LabeledSample};
use gnl_core::fdm::{FdmConfig, FdmMethod};
use gnl_core::model::{init_model, load_checkpoint, save_checkpoint, ModelBundle};
use gnl_core::scoring::{infer, per_sample_rng, write_heat_image, write_score_map, InferenceConfig};
use gnl_core::tensor::ImageTensor;
use gnl_core::train::train;

use crate::config::{NamedInference, RunConfig, SuiteConfig};

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    std::fs::write(path.as_ref(), text)?;
    Ok(())
}

pub fn cmd_synth(out: &Path, seed: u64, n_per_class: usize) -> Result<()> {
    let (manifest, ood) = generate_synthetic(out, seed, n_per_class)?;
    write_text(
        out.join("synth_config.toml"),
        &format!("seed = {seed}\nn_per_class = {n_per_class}\n"),
    )?;
    println!("wrote {} ID entries to {}", manifest.entries.len(), out.join("manifest.csv").display());
    println!("wrote {} OOD entries to {}", ood.entries.len(), out.join("manifest_ood.csv").display());
    Ok(())
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>) -> Result<()> {
    let (mut cfg, text) = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        cfg.override_seed(seed);
    }
    let manifest = DatasetManifest::load(&cfg.data.train_manifest)?;
    let images = manifest.load_images()?;
    let (train_pool, _) = one_vs_all_split(&images, &cfg.data.normal_class)?;
    if train_pool.is_empty() {
        return Err(GnlError::Config(format!(
            "no '{}' training images in {}",
            cfg.data.normal_class,
            cfg.data.train_manifest.display()
        )));
    }

    std::fs::create_dir_all(&cfg.data.output_dir)?;
    let mut bundle: ModelBundle<f32> = init_model(&cfg.model)?;
    bundle.meta.run_config = text.clone();
    let (mut bundle, log) = train(&train_pool, &cfg.train, bundle)?;
    bundle.meta.run_config = text.clone();

    let ckpt = cfg.data.output_dir.join("model.gnl");
    save_checkpoint(&bundle, &ckpt)?;
    let log_path = cfg.data.output_dir.join("train_log.csv");
    log.write_csv(BufWriter::new(File::create(&log_path)?))?;
    write_text(cfg.data.output_dir.join("config_used.toml"), &text)?;

    let last = log.rows.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} normals; final total loss {:.6}",
        last.epoch,
        train_pool.len(),
        last.total
    );
    println!("checkpoint: {}", ckpt.display());
    println!("train log:  {}", log_path.display());
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub normal_class: String,
    pub tta_method: Option<String>,
    pub tta_alpha: Option<f64>,
    pub style_pool: Option<PathBuf>,
    pub style_seed: Option<u64>,
    pub style_repeats: Option<usize>,
    pub smoothing_sigma: f64,
    pub out: Option<PathBuf>,
    pub dump_maps: Option<PathBuf>,
    pub seed: Option<u64>,
}

fn eval_infer_config(args: &EvalArgs) -> Result<(InferenceConfig, Vec<ImageTensor<f32>>)> {
    let tta_requested = args.tta_method.is_some()
        || args.tta_alpha.is_some()
        || args.style_seed.is_some()
        || args.style_repeats.is_some();
    if tta_requested && args.style_pool.is_none() {
        return Err(GnlError::Config(
            "test-time augmentation flags require --style-pool <manifest>".into(),
        ));
    }
    let tta = if let Some(pool_path) = &args.style_pool {
        let pool_manifest = DatasetManifest::load(pool_path)?;
        let pool = pool_manifest.train_images_of_class(&args.normal_class)?;
        let method = match &args.tta_method {
            Some(name) => FdmMethod::parse(name)?,
            None => FdmMethod::Exact,
        };
        let cfg = FdmConfig {
            method,
            alpha: args.tta_alpha.unwrap_or(0.5),
            style_seed: args.style_seed.or(args.seed).unwrap_or(0),
            style_repeats: args.style_repeats.unwrap_or(1),
            ..Default::default()
        };
        Some((cfg, pool))
    } else {
        None
    };
    match tta {
        Some((cfg, pool)) => {
            let infer_cfg = InferenceConfig { tta: Some(cfg), smoothing_sigma: args.smoothing_sigma };
            infer_cfg.validate()?;
            Ok((infer_cfg, pool))
        }
        None => {
            let infer_cfg = InferenceConfig { tta: None, smoothing_sigma: args.smoothing_sigma };
            infer_cfg.validate()?;
            Ok((infer_cfg, Vec::new()))
        }
    }
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let bundle = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.manifest)?;
    let images = manifest.load_images()?;
    let samples: Vec<LabeledSample> = images
        .into_iter()
        .filter(|s| s.split == gnl_core::eval::Split::Test)
        .map(|s| LabeledSample {
            label: u8::from(s.class != args.normal_class),
            image: s.image,
            suite: "id".into(),
            id: s.id,
        })
        .collect();
    if samples.is_empty() {
        return Err(GnlError::Config("manifest has no test images".into()));
    }
    let (infer_cfg, style_pool) = eval_infer_config(&args)?;
    let master_seed = args.seed.unwrap_or_else(|| {
        infer_cfg.tta.as_ref().map(|t| t.style_seed).unwrap_or(0)
    });

    if let Some(dir) = &args.dump_maps {
        std::fs::create_dir_all(dir)?;
    }
    let mut scored = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let mut rng = per_sample_rng(master_seed, idx as u64);
        let (score, smap) = infer(&sample.image, &bundle, &infer_cfg, &style_pool, &mut rng)?;
        if let Some(dir) = &args.dump_maps {
            let stem = sample.id.replace(['/', '\\'], "_");
            write_score_map(&smap, dir.join(format!("{stem}.gnlm")))?;
            write_heat_image(&smap, dir.join(format!("{stem}.png")))?;
        }
        scored.push((sample.id.clone(), sample.label, score as f64));
    }
    scored.sort_by(|a, b| a.0.cmp(&b.0));

    let scores: Vec<f64> = scored.iter().map(|s| s.2).collect();
    let labels: Vec<u8> = scored.iter().map(|s| s.1).collect();
    let value = auroc(&scores, &labels)?;

    if let Some(out) = &args.out {
        let mut w = BufWriter::new(File::create(out)?);
        writeln!(w, "id,label,score")?;
        for (id, label, score) in &scored {
            writeln!(w, "{id},{label},{score}")?;
        }
        w.flush()?;
        let echo = format!(
            "checkpoint = {:?}\nmanifest = {:?}\nnormal_class = {:?}\nsmoothing_sigma = {}\nseed = {}\ntta = {}\n",
            args.checkpoint,
            args.manifest,
            args.normal_class,
            args.smoothing_sigma,
            master_seed,
            infer_cfg.tta.is_some(),
        );
        write_text(out.with_extension("config.toml"), &echo)?;
        println!("scores: {}", out.display());
    }
    println!("AUROC: {value:.6} ({} normals, {} anomalies)", labels.iter().filter(|&&l| l == 0).count(), labels.iter().filter(|&&l| l == 1).count());
    Ok(())
}

pub fn cmd_corrupt(
    manifest_path: &Path,
    kind: &str,
    severity: u8,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let kind = CorruptionKind::parse(kind)?;
    let spec = CorruptionSpec { kind, severity, seed };
    spec.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for entry in &manifest.entries {
        let image = load_image(manifest.root.join(&entry.path))?;
        let corrupted = corrupt(&image, &spec)?;
        let dest = out.join(&entry.path);
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent)?;
        }
        save_image(&corrupted, &dest)?;
        entries.push(entry.clone());
    }
    let out_manifest = DatasetManifest { root: out.to_path_buf(), entries };
    out_manifest.save(out.join("manifest.csv"))?;
    write_text(
        out.join("corrupt_config.toml"),
        &format!("kind = \"{}\"\nseverity = {severity}\nseed = {seed}\n", spec.kind.name()),
    )?;
    println!(
        "corrupted {} images with {} severity {severity} into {}",
        out_manifest.entries.len(),
        spec.kind.name(),
        out.display()
    );
    Ok(())
}

fn build_suites(
    cfg: &RunConfig,
    id_test: &[LabeledSample],
) -> Result<BTreeMap<String, Vec<LabeledSample>>> {
    let mut suites = BTreeMap::new();
    suites.insert("id".to_string(), id_test.to_vec());
    for suite in &cfg.suites {
        match suite {
            SuiteConfig::Corruption { name, corruption, severity, seed } => {
                let kind = CorruptionKind::parse(corruption)?;
                let spec = CorruptionSpec { kind, severity: *severity, seed: *seed };
                spec.validate()?;
                let samples: Vec<LabeledSample> = id_test
                    .iter()
                    .map(|s| {
                        Ok(LabeledSample {
                            image: corrupt(&s.image, &spec)?,
                            label: s.label,
                            suite: name.clone(),
                            id: s.id.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                suites.insert(name.clone(), samples);
            }
            SuiteConfig::Domain { name, manifest } => {
                let domain = DatasetManifest::load(manifest)?;
                let images = domain.load_images()?;
                let samples: Vec<LabeledSample> = images
                    .into_iter()
                    .filter(|s| s.split == gnl_core::eval::Split::Test)
                    .map(|s| LabeledSample {
                        label: u8::from(s.class != cfg.data.normal_class),
                        image: s.image,
                        suite: name.clone(),
                        id: s.id,
                    })
                    .collect();
                if samples.is_empty() {
                    return Err(GnlError::Config(format!("domain suite '{name}' has no test images")));
                }
                suites.insert(name.clone(), samples);
            }
        }
    }
    Ok(suites)
}

pub fn cmd_benchmark(config_path: &Path, checkpoint: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let (mut cfg, text) = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        cfg.override_seed(seed);
    }
    let ckpt_path = checkpoint.unwrap_or_else(|| cfg.data.output_dir.join("model.gnl"));
    let bundle = load_checkpoint(&ckpt_path)?;

    let manifest = DatasetManifest::load(&cfg.data.test_manifest)?;
    let images = manifest.load_images()?;
    let (_, id_test) = one_vs_all_split(&images, &cfg.data.normal_class)?;
    let suites = build_suites(&cfg, &id_test)?;

    let needs_style = cfg.bench_configs.iter().any(|bc| bc.infer.tta.is_some())
        || (cfg.bench_configs.is_empty() && cfg.infer.tta.is_some());
    let style_pool = if needs_style {
        let train_manifest = DatasetManifest::load(&cfg.data.train_manifest)?;
        train_manifest.train_images_of_class(&cfg.data.normal_class)?
    } else {
        Vec::new()
    };

    let configs: Vec<(String, InferenceConfig)> = if cfg.bench_configs.is_empty() {
        vec![("default".to_string(), cfg.infer.clone())]
    } else {
        cfg.bench_configs
            .iter()
            .map(|NamedInference { name, infer }| (name.clone(), infer.clone()))
            .collect()
    };

    let master_seed = seed.unwrap_or(cfg.model.seed);
    let report = benchmark(&bundle, &suites, &configs, &style_pool, master_seed)?;

    std::fs::create_dir_all(&cfg.data.output_dir)?;
    let out = cfg.data.output_dir.join("benchmark.csv");
    report.write_csv(BufWriter::new(File::create(&out)?))?;
    write_text(cfg.data.output_dir.join("benchmark_config.toml"), &text)?;
    for row in &report.rows {
        println!(
            "{:12} {:24} n={}+{}  AUROC {:.4}",
            row.config_name,
            row.suite,
            row.n_normal,
            row.n_anomaly,
            row.auroc
        );
    }
    println!("report: {}", out.display());
    Ok(())
}

pub fn cmd_plot_hist(scores_path: &Path, bins: usize, out: &Path, svg: Option<PathBuf>) -> Result<()> {
    let mut reader = csv::Reader::from_reader(BufReader::new(File::open(scores_path)?));
    let headers = reader
        .headers()
        .map_err(|e| GnlError::Format(format!("scores header: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| GnlError::Format("scores CSV needs a 'label' column".into()))?;
    let score_idx = headers
        .iter()
        .position(|h| h == "score")
        .ok_or_else(|| GnlError::Format("scores CSV needs a 'score' column".into()))?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| GnlError::Format(format!("scores row: {e}")))?;
        let label: u8 = record
            .get(label_idx)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| GnlError::Format("bad label value".into()))?;
        let score: f64 = record
            .get(score_idx)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| GnlError::Format("bad score value".into()))?;
        labels.push(label);
        scores.push(score);
    }
    let hist = score_histogram(&scores, &labels, bins)?;
    hist.write_csv(BufWriter::new(File::create(out)?))?;
    if let Some(svg_path) = svg {
        hist.write_svg(BufWriter::new(File::create(&svg_path)?))?;
        println!("svg: {}", svg_path.display());
    }
    println!("histogram: {}", out.display());
    Ok(())
}
