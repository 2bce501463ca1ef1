//! Run configuration file schema (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gnl_core::error::{GnlError, Result};
use gnl_core::model::ModelConfig;
use gnl_core::scoring::InferenceConfig;
use gnl_core::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    #[serde(default = "default_normal_class")]
    pub normal_class: String,
    pub output_dir: PathBuf,
}

fn default_normal_class() -> String {
    "normal".to_string()
}

/// Declarative evaluation suite: either a corruption applied on the fly to
/// the ID test split, or a separate domain manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuiteConfig {
    Corruption {
        name: String,
        corruption: String,
        severity: u8,
        #[serde(default)]
        seed: u64,
    },
    Domain {
        name: String,
        manifest: PathBuf,
    },
}

impl SuiteConfig {
    pub fn name(&self) -> &str {
        match self {
            SuiteConfig::Corruption { name, .. } | SuiteConfig::Domain { name, .. } => name,
        }
    }
}

/// A named inference configuration for the benchmark matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedInference {
    pub name: String,
    #[serde(flatten)]
    pub infer: InferenceConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub infer: InferenceConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub suites: Vec<SuiteConfig>,
    #[serde(default)]
    pub bench_configs: Vec<NamedInference>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| GnlError::Config(format!("cannot read config {}: {e}", path.as_ref().display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| GnlError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        for bc in &self.bench_configs {
            bc.infer.validate()?;
        }
        for suite in &self.suites {
            if let SuiteConfig::Corruption { corruption, severity, .. } = suite {
                gnl_core::corruption::CorruptionKind::parse(corruption)?;
                if !(1..=5).contains(severity) {
                    return Err(GnlError::Config(format!(
                        "suite '{}': severity must be 1-5",
                        suite.name()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies the single master seed (flag > GNL_SEED > config values) to
    /// every seeded component.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.train.augment.seed = seed;
        if let Some(tta) = &mut self.infer.tta {
            tta.style_seed = seed;
        }
        for bc in &mut self.bench_configs {
            if let Some(tta) = &mut bc.infer.tta {
                tta.style_seed = seed;
            }
        }
    }
}

/// Resolves the master seed: explicit flag, then GNL_SEED, then none.
pub fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("GNL_SEED") {
        Ok(text) => {
            let parsed = text
                .parse::<u64>()
                .map_err(|_| GnlError::Config(format!("GNL_SEED must be an integer, got '{text}'")))?;
            Ok(Some(parsed))
        }
        Err(_) => Ok(None),
    }
}
