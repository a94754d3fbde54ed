//! Declarative experiment configuration.
//!
//! Every field has a default and unknown keys are rejected, so a typo fails
//! loudly instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::ToySpec;
use crate::model::ModelConfig;
use crate::speller::DecodeOptions;
use crate::training::TrainRecipe;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training set as JSON lines; generated when absent.
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub generator: ToySpec,
    /// Utterances generated for the dev split.
    pub dev_utts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            dev_path: None,
            generator: ToySpec::default(),
            dev_utts: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub checkpoint_dir: PathBuf,
    pub log_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_dir: PathBuf::from("logs"),
        }
    }
}

/// Training continuation and chunk-label wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Checkpoint whose matching parameters initialise the model.
    pub init_from: Option<PathBuf>,
    /// Chunk-length labels (JSON lines of `{id, labels}`).
    pub chunk_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of every random stream in the run.
    pub seed: u64,
    pub model: ModelConfig,
    pub recipe: TrainRecipe,
    pub data: DataConfig,
    pub decode: DecodeOptions,
    pub io: IoConfig,
    pub init: InitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            recipe: TrainRecipe::default(),
            data: DataConfig::default(),
            decode: DecodeOptions::default(),
            io: IoConfig::default(),
            init: InitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.model.attention.validate().map_err(|e| inv(e.to_string()))?;
        self.model.encoder.validate().map_err(|e| inv(e.to_string()))?;
        self.recipe.validate().map_err(|e| inv(e.to_string()))?;
        self.data.generator.validate().map_err(inv)?;
        if self.data.generator.dim != self.model.input_dim && self.data.train_path.is_none() {
            return Err(inv(format!(
                "generator dim {} differs from model input_dim {}",
                self.data.generator.dim, self.model.input_dim
            )));
        }
        if self.data.generator.vocab_size > self.model.vocab_size {
            return Err(inv("generator vocab exceeds model vocab".into()));
        }
        if self.decode.beam == 0 || !(self.decode.temperature > 0.0) || self.decode.max_len == Some(0) {
            return Err(inv("decode needs beam >= 1, temperature > 0, max_len >= 1".into()));
        }
        Ok(())
    }
}
