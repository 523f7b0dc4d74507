//! Run configuration: a TOML file bundling the network spec, optimizer
//! settings, seeds, and file paths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use asta3d_core::network::{NetworkSpec, Task};
use asta3d_core::train::TrainOptions;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub task: Task,
    pub network: NetworkSpec,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub paths: PathsConfig,
}

fn default_schema_version() -> u32 {
    CONFIG_SCHEMA_VERSION
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_decay_period")]
    pub decay_period_steps: u64,
}

fn default_decay_factor() -> f64 {
    0.7
}

fn default_decay_period() -> u64 {
    200_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Seeds,
    /// Stop early once validation reaches this metric.
    #[serde(default)]
    pub target_metric: Option<f64>,
    /// Validation share carved out of the training set when the dataset
    /// provides no test split.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub fps_augmentation: bool,
}

fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint_out: PathBuf,
    pub report_out: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = toml::from_str(&text).context("parsing config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(
                "config schema version {} unsupported (expected {})",
                self.schema_version,
                CONFIG_SCHEMA_VERSION
            );
        }
        if !(self.optimizer.learning_rate > 0.0) {
            bail!("learning rate must be positive");
        }
        if !(self.optimizer.decay_factor > 0.0 && self.optimizer.decay_factor <= 1.0) {
            bail!("decay factor must lie in (0, 1]");
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            bail!("epochs and batch size must be at least 1");
        }
        if !(self.training.val_fraction > 0.0 && self.training.val_fraction < 1.0) {
            bail!("validation fraction must lie in (0, 1)");
        }
        if self.task != self.network.task {
            bail!("config task does not match network spec task");
        }
        self.network.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.optimizer.learning_rate,
            decay_factor: self.optimizer.decay_factor,
            decay_period_steps: self.optimizer.decay_period_steps,
            init_seed: self.training.seeds.init,
            shuffle_seed: self.training.seeds.shuffle,
            target_metric: self.training.target_metric,
            fps_augmentation: self.training.fps_augmentation,
        }
    }
}
