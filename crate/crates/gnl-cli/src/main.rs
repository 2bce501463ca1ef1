//! `gnl` command line: train / eval / corrupt / benchmark / synth /
//! plot-hist.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data/format
//! error, 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gnl_core::error::GnlError;

#[derive(Parser)]
#[command(name = "gnl", version, about = "Reverse-distillation anomaly detection under distribution shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes checkpoint + train log.
    Train {
        /// Run configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Master seed override (flag > GNL_SEED > config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a test manifest with a checkpoint; writes a scores CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Class treated as normal (label 0).
        #[arg(long, default_value = "normal")]
        normal_class: String,
        /// Feature-distribution-matching method: exact | moment.
        #[arg(long)]
        tta_method: Option<String>,
        /// Style mixing severity in [0, 1].
        #[arg(long)]
        tta_alpha: Option<f64>,
        /// Manifest providing the normal training pool for style sampling.
        #[arg(long)]
        style_pool: Option<PathBuf>,
        #[arg(long)]
        style_seed: Option<u64>,
        #[arg(long)]
        style_repeats: Option<usize>,
        /// Gaussian smoothing of the score map (0 disables).
        #[arg(long, default_value_t = 0.0)]
        smoothing_sigma: f64,
        /// Output scores CSV (id,label,score).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-sample score maps (.gnlm) and heat images.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply one corruption to every image of a manifest.
    Corrupt {
        #[arg(long)]
        manifest: PathBuf,
        /// brightness | contrast | defocus_blur | gaussian_noise
        #[arg(long)]
        kind: String,
        #[arg(long)]
        severity: u8,
        /// Noise seed (gaussian_noise only).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every declared suite with every benchmark config.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path (default: <output_dir>/model.gnl).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the synthetic blob/stripe dataset with a built-in
    /// brightness-shifted OOD copy.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
    },
    /// Bin a scores CSV into per-label histograms.
    PlotHist {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional bar-chart SVG.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn exit_code(err: &GnlError) -> u8 {
    match err {
        GnlError::Config(_) => 2,
        GnlError::Shape(_) | GnlError::Format(_) | GnlError::Io(_) | GnlError::UndefinedMetric(_) => 3,
        GnlError::Numeric(_) => 4,
    }
}

fn run(cli: Cli) -> gnl_core::Result<()> {
    match cli.command {
        Command::Train { config, seed } => {
            let seed = config::resolve_seed(seed)?;
            commands::cmd_train(&config, seed)
        }
        Command::Eval {
            checkpoint,
            manifest,
            normal_class,
            tta_method,
            tta_alpha,
            style_pool,
            style_seed,
            style_repeats,
            smoothing_sigma,
            out,
            dump_maps,
            seed,
        } => {
            let seed = config::resolve_seed(seed)?;
            commands::cmd_eval(commands::EvalArgs {
                checkpoint,
                manifest,
                normal_class,
                tta_method,
                tta_alpha,
                style_pool,
                style_seed,
                style_repeats,
                smoothing_sigma,
                out,
                dump_maps,
                seed,
            })
        }
        Command::Corrupt { manifest, kind, severity, seed, out } => {
            commands::cmd_corrupt(&manifest, &kind, severity, seed, &out)
        }
        Command::Benchmark { config, checkpoint, seed } => {
            let seed = config::resolve_seed(seed)?;
            commands::cmd_benchmark(&config, checkpoint, seed)
        }
        Command::Synth { out, seed, n_per_class } => commands::cmd_synth(&out, seed, n_per_class),
        Command::PlotHist { scores, bins, out, svg } => commands::cmd_plot_hist(&scores, bins, &out, svg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
