//! Experiment configuration: model and training hyperparameters plus the
//! JSON document that binds them to a label schema and data options.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::schema::{LabelSchema, Task};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden-state layers consumed from the feature stack, including the
    /// convolutional feature map at index 0.
    pub num_layers: usize,
    /// Embedding width of each hidden-state layer.
    pub feature_dim: usize,
    /// Width of the score projection inside attentive pooling.
    pub attention_dim: usize,
    pub projection_dim: usize,
    pub shared_dim: usize,
    pub dropout_rate: f64,
    /// Hidden width of each chain predictor; `None` keeps the predictors as
    /// single affine maps.
    pub chain_hidden: Option<usize>,
    /// When false the HIGH and CULTURE heads are plain multi-sigmoid layers
    /// instead of bi-directional regression chains (ablation configuration).
    pub use_chains: bool,
    pub target_task: Task,
    pub loss_lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 25,
            feature_dim: 1024,
            attention_dim: 128,
            projection_dim: 128,
            shared_dim: 64,
            dropout_rate: 0.25,
            chain_hidden: None,
            use_chains: true,
            target_task: Task::Two,
            loss_lambda: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("feature_dim", self.feature_dim),
            ("attention_dim", self.attention_dim),
            ("projection_dim", self.projection_dim),
            ("shared_dim", self.shared_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(h) = self.chain_hidden {
            if h == 0 {
                return Err(Error::Config("chain_hidden must be positive when set".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.loss_lambda) {
            return Err(Error::Config(format!(
                "loss_lambda must lie in [0, 1], got {}",
                self.loss_lambda
            )));
        }
        Ok(())
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate for encoder-provider parameters when the provider is
    /// fine-tunable. The reference providers are frozen, so this group is
    /// empty in the shipped configurations.
    pub lr_encoder: f64,
    pub lr_downstream: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Optional hard cap on optimizer steps; `None` trains to max_epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_encoder: 1e-5,
            lr_downstream: 1e-3,
            weight_decay: 1e-3,
            batch_size: 1024,
            patience: 10,
            max_epochs: 25,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_encoder <= 0.0 || self.lr_downstream <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Data-pipeline options.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Waveform augmentation policy for the training split. `None` disables
    /// augmentation; feature-stack providers never augment regardless.
    pub augment: Option<AugmentPolicy>,
}

/// Top-level experiment document: `{schema, model, train, data}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema: LabelSchema,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(policy) = &self.data.augment {
            policy.validate()?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash over the full configuration; used to refuse resuming a
    /// run under different settings.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
