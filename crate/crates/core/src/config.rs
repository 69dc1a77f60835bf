//! Run configuration: one JSON document wiring model, training, objective,
//! data paths and optional noise injection together. Unknown keys are
//! rejected everywhere so a typo cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseKind;
use crate::objectives::ObjectiveConfig;
use crate::train::{OptimizerKind, TrainConfig};

/// `model` section: [`crate::model::ModelConfig`] without the vocabulary
/// size, which comes from the corpus (an explicit value must match it).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    #[serde(default = "default_use_source")]
    pub use_source: bool,
}

fn default_use_source() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::adam()
}

fn default_eval_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Replace,
    Append,
}

impl NoiseMode {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseMode::Replace => "replace",
            NoiseMode::Append => "append",
        }
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(NoiseMode::Replace),
            "append" => Ok(NoiseMode::Append),
            other => Err(Error::InvalidInput(format!("unknown noise mode {other:?}"))),
        }
    }
}

/// Optional `noise` section: corruption applied to the training corpus
/// before training starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
    #[serde(default = "default_noise_mode")]
    pub mode: NoiseMode,
}

fn default_noise_mode() -> NoiseMode {
    NoiseMode::Append
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub objective: ObjectiveConfig,
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
}

impl std::str::FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

impl RunConfig {
    /// Loads the config and resolves the data paths relative to the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut config: RunConfig = text.parse()?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.data.train = resolve(base, &config.data.train);
        config.data.valid = config.data.valid.map(|p| resolve(base, &p));
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            optimizer: self.train.optimizer,
            seed: self.train.seed,
            objective: self.objective,
            eval_every: self.train.eval_every,
            max_iterations: None,
        }
    }

    /// Model config with the vocabulary size taken from (and checked
    /// against) the corpus.
    pub fn model_config(&self, corpus_vocab: usize) -> Result<crate::model::ModelConfig> {
        if let Some(v) = self.model.vocab_size {
            if v != corpus_vocab {
                return Err(Error::Config(format!(
                    "configured vocab_size {v} does not match corpus vocabulary {corpus_vocab}"
                )));
            }
        }
        Ok(crate::model::ModelConfig {
            vocab_size: corpus_vocab,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            context_window: self.model.context_window,
            use_source: self.model.use_source,
        })
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
