//! Run configuration: TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use chrono::TimeDelta;
use mealrec::builder::BuilderConfig;
use mealrec::ccmr::{HyperParams, Variant};
use mealrec::corpus::DEFAULT_POSITIVE_THRESHOLD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub recipe_csv: Option<PathBuf>,
    pub review_csv: Option<PathBuf>,
    pub meal_csv: Option<PathBuf>,
    pub user_meal_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuilderKeys {
    pub time_window_days: i64,
    pub max_attempts_per_user: Option<usize>,
    pub k_core: usize,
    pub positive_threshold: u8,
}

impl Default for BuilderKeys {
    fn default() -> Self {
        let b = BuilderConfig::default();
        BuilderKeys {
            time_window_days: b.time_window.num_days(),
            max_attempts_per_user: b.max_attempts_per_user,
            k_core: b.k_core,
            positive_threshold: DEFAULT_POSITIVE_THRESHOLD,
        }
    }
}

/// Hyperparameters except the seed, which lives under `[seeds]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperKeys {
    pub d: usize,
    pub l: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_coeff: f64,
    pub leaky_slope: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub holdout_fraction: f64,
}

impl Default for HyperKeys {
    fn default() -> Self {
        let h = HyperParams::default();
        HyperKeys {
            d: h.d,
            l: h.l,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            l2_coeff: h.l2_coeff,
            leaky_slope: h.leaky_slope,
            epochs: h.epochs,
            negatives_per_positive: h.negatives_per_positive,
            holdout_fraction: h.holdout_fraction,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub build: u64,
    pub split: u64,
    pub negatives: u64,
    pub train: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub builder: BuilderKeys,
    pub hyper: HyperKeys,
    pub seeds: Seeds,
    pub variant: Variant,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn builder_config(&self) -> BuilderConfig {
        BuilderConfig {
            time_window: TimeDelta::days(self.builder.time_window_days),
            max_attempts_per_user: self.builder.max_attempts_per_user,
            k_core: self.builder.k_core,
            rng_seed: self.seeds.build,
        }
    }

    pub fn hyper_params(&self) -> HyperParams {
        let h = &self.hyper;
        HyperParams {
            d: h.d,
            l: h.l,
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            l2_coeff: h.l2_coeff,
            leaky_slope: h.leaky_slope,
            epochs: h.epochs,
            negatives_per_positive: h.negatives_per_positive,
            holdout_fraction: h.holdout_fraction,
            seed: self.seeds.train,
        }
    }

    pub fn report_dir(&self) -> PathBuf {
        self.paths.report_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// Hex SHA-256 of the effective configuration serialized as JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// First line of every report.
    pub fn report_header(&self) -> String {
        let s = &self.seeds;
        format!(
            "# mealrec {} config_sha256={} seeds build={} split={} negatives={} train={}",
            env!("CARGO_PKG_VERSION"),
            self.hash(),
            s.build,
            s.split,
            s.negatives,
            s.train
        )
    }
}

/// Returns the path stored in `slot`, requiring it to be set and to exist.
pub fn input(slot: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    let Some(p) = slot else { bail!("no {what} given (flag or config key)") };
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(p.clone())
}
