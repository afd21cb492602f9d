//! The declarative experiment configuration: one JSON document resolving to
//! task spec, generator knobs, model size, and trainer settings. Command
//! line flags override individual fields after parsing.

use serde::{Deserialize, Serialize};

use crate::io::IoError;
use crate::loss::LossVariant;
use crate::optim::TrainConfig;
use crate::synth::SynthConfig;
use crate::tasks::{TaskKind, TaskSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension for tasks with embedded sources or targets.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

fn default_embed_dim() -> usize {
    16
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: default_embed_dim(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_loss")]
    pub loss: LossVariant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_negatives")]
    pub negatives: usize,
}

fn default_epochs() -> usize {
    50
}

fn default_batch_size() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-2
}

fn default_lambda() -> f64 {
    1.0
}

fn default_loss() -> LossVariant {
    LossVariant::MaxMatching
}

fn default_negatives() -> usize {
    100
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            lambda: default_lambda(),
            loss: default_loss(),
            seed: 0,
            negatives: default_negatives(),
        }
    }
}

/// Everything one run needs: task kind, generator knobs, model size, and
/// trainer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
}

impl ExperimentConfig {
    pub fn from_json(bytes: &[u8]) -> std::result::Result<Self, IoError> {
        let cfg: ExperimentConfig =
            serde_json::from_slice(bytes).map_err(|e| IoError::Format(e.to_string()))?;
        cfg.validate().map_err(|e| IoError::Format(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if self.model.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        self.train_config().validate()
    }

    /// The standard mapping/weighting row for the configured task.
    pub fn task_spec(&self) -> TaskSpec {
        match self.task {
            TaskKind::Mil => TaskSpec::mil(self.synth.n_classes, self.synth.feature_dim),
            TaskKind::Pll => TaskSpec::pll(
                self.synth.n_classes,
                self.synth.feature_dim,
                self.model.embed_dim,
            ),
            TaskKind::Rs => TaskSpec::rs(self.synth.catalog_size, self.model.embed_dim),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let spec = self.task_spec();
        let mut cfg = TrainConfig::new(
            self.train.lr,
            self.train.seed,
            spec.loss_config(self.train.loss, self.train.lambda),
        );
        cfg.epochs = self.train.epochs;
        cfg.batch_size = self.train.batch_size;
        cfg.negatives = self.train.negatives;
        cfg
    }
}
