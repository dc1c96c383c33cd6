//! Hierarchical multi-task affect recognition for vocal bursts.
//!
//! The pipeline turns per-utterance stacks of pretrained speech
//! representations into five coupled predictions: a learnable layer-weighted
//! aggregation and attentive time pooling produce a fixed-length feature,
//! and a structured output layer predicts arousal/valence, ten emotion
//! intensities, country, burst type and forty culture-specific intensities,
//! with the emotion heads realized as bi-directional regression chains
//! ordered by accumulated label correlation. Regression tasks train with a
//! concordance-correlation objective, classifications with cross entropy,
//! combined by a weighted multi-task loss.
//!
//! Start with the `examples/` directory: each example is a runnable tour of
//! one capability (synthetic data, augmentation, encoding, chains, training,
//! evaluation, analysis). The `vbchain` binary wraps the same functionality
//! as subcommands.

pub mod analysis;
pub(crate) mod seeding;
pub mod augment;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod matrix;
pub mod model;
pub mod objective;
pub mod schema;
pub mod tape;
pub mod trainer;

pub use config::{DataConfig, ExperimentConfig, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use schema::{LabelSchema, Task, TaskPredictions};
