//! Run configuration shared by every subcommand, stored as one JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SplitRatios, SyntheticCohortConfig};
use crate::metrics::EvalOptions;
use crate::trainer::{GenerationMode, GradCheckConfig, TrainConfig};

/// Environment variable that replaces the seed of the command being run.
pub const SEED_ENV: &str = "EHRPD_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Visits generated after each seed patient's first real visit.
    pub horizon: usize,
    pub mode: GenerationMode,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            horizon: 9,
            mode: GenerationMode::OneShot,
            seed: 42,
        }
    }
}

/// Optional held-out split written next to a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub enabled: bool,
    pub ratios: SplitRatios,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            ratios: SplitRatios::default(),
            seed: 1,
        }
    }
}

/// File locations. Unset entries must be given on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Cohort file written by `synth-data` and read by `train`.
    pub data: Option<PathBuf>,
    /// Checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch CSV log; defaults to `metrics.csv` inside the checkpoint.
    pub metrics_log: Option<PathBuf>,
    /// Seed cohort for `generate`.
    pub seeds: Option<PathBuf>,
    /// Generated cohort.
    pub synthetic: Option<PathBuf>,
    /// Real cohort for `evaluate`.
    pub real: Option<PathBuf>,
    /// JSON report of `evaluate` and `grad-check`; stdout when unset.
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticCohortConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    pub evaluation: EvalOptions,
    pub grad_check: GradCheckConfig,
    /// Worker threads. Results do not depend on this value.
    pub threads: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticCohortConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            evaluation: EvalOptions::default(),
            grad_check: GradCheckConfig::default(),
            threads: 1,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.synthetic.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.split.ratios.sizes(0).map_err(|e| invalid(&e))?;
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be at least 1".into()));
        }
        if let Some(f) = self
            .evaluation
            .pd_fractions
            .iter()
            .find(|f| !(0.0..=1.0).contains(*f))
        {
            return Err(ConfigError::Invalid(format!(
                "presence-disclosure fractions must lie in [0, 1], got {f}"
            )));
        }
        Ok(())
    }
}

/// Parses the value of [`SEED_ENV`]. Unset or empty means no override.
pub fn seed_from_env() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(s) if s.trim().is_empty() => Ok(None),
        Ok(s) => s.trim().parse().map(Some).map_err(|_| {
            ConfigError::Invalid(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))
        }),
        Err(_) => Ok(None),
    }
}
