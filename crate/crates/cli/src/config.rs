//! Run configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use maskgen::sampler::SamplerConfig;
use maskgen::tokenizer::VqConfig;
use maskgen::training::TrainConfig;
use maskgen::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const RESOLVED_NAME: &str = "config.resolved";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub runs_dir: PathBuf,
    /// Seeds data generation and model initialisation.
    pub seed: u64,
    /// Keep an extra numbered checkpoint every this many epochs.
    pub checkpoint_every: usize,
    /// Samples drawn after each epoch for the curve's KL column.
    pub eval_samples: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            name: "desk".into(),
            runs_dir: "runs".into(),
            seed: 0,
            checkpoint_every: 1,
            eval_samples: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Images,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// PGM/PPM files; either flat (class 0) or in subdirectories named by
    /// class index.
    pub image_dir: Option<PathBuf>,
    /// Synthetic corpus size.
    pub examples: usize,
    /// Gray levels of the synthetic corpus.
    pub levels: usize,
    pub classes: usize,
    pub coupling: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            image_dir: None,
            examples: 2048,
            levels: 16,
            classes: 2,
            coupling: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for TokenizerTrainSection {
    fn default() -> Self {
        TokenizerTrainSection {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub tokenizer: VqConfig,
    pub tokenizer_train: TokenizerTrainSection,
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the run config stored in a checkpoint, ignoring the trainer's
    /// `[state]` table.
    pub fn from_checkpoint_text(text: &str) -> Result<Self, String> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
        table.remove("state");
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.tokenizer.validate().map_err(|e| e.to_string())?;
        self.transformer.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.sampler.validate().map_err(|e| e.to_string())?;
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return Err(format!("run.name `{}` must be a plain directory name", self.run.name));
        }
        if self.run.checkpoint_every == 0 || self.run.eval_samples == 0 {
            return Err("run.checkpoint_every and run.eval_samples must be positive".into());
        }
        if self.tokenizer_train.epochs == 0 || self.tokenizer_train.batch_size == 0 {
            return Err("tokenizer_train.epochs and tokenizer_train.batch_size must be positive".into());
        }
        if self.data.classes == 0 {
            return Err("data.classes must be positive".into());
        }
        if self.data.source == DataSource::Images && self.data.image_dir.is_none() {
            return Err("data.source = \"images\" needs data.image_dir".into());
        }
        Ok(())
    }

    /// Canonical text: every field, in declaration order.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("run config serialises")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.run.runs_dir.join(&self.run.name)
    }
}
