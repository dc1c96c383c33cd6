//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by any vbchain component.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("duplicate file_id `{0}` in manifest")]
    DuplicateFileId(String),

    #[error("unknown file_id `{0}`")]
    UnknownFileId(String),

    #[error("feature file {path}: bad magic (expected VBFS)")]
    BadMagic { path: PathBuf },

    #[error("feature file {path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("feature file {path}: truncated payload")]
    Truncated { path: PathBuf },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{what}={value} outside allowed range [{lo}, {hi}]")]
    OutOfRange {
        what: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch normalization requires batch size >= 2 in train mode, got {0}")]
    BatchTooSmall(usize),

    #[error("column `{0}` is constant; correlation undefined")]
    ConstantColumn(String),

    #[error("all frames masked; attentive pooling needs at least one valid frame")]
    AllFramesMasked,

    #[error("task {task}: {message}")]
    MissingLabels { task: String, message: String },

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("loss became non-finite at step {step}; diagnostics written to {dump}")]
    NanLoss { step: usize, dump: PathBuf },

    #[error("config hash mismatch: artifact was trained with a different configuration")]
    ConfigHashMismatch,

    #[error("model artifact: {0}")]
    Artifact(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("adapter command failed: {0}")]
    Adapter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
