//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown label: {0:?}")]
    UnknownLabel(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("support set is empty")]
    EmptySupport,

    #[error("bad class partition: {n_classes} classes cannot be split into {n_folds} folds of {per_fold}")]
    BadPartition {
        n_classes: usize,
        n_folds: usize,
        per_fold: usize,
    },

    #[error("insufficient data for class {class:?}: {reason}")]
    InsufficientData { class: String, reason: String },

    #[error("unknown class: {0:?}")]
    UnknownClass(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("too few runs: need at least 2, got {0}")]
    TooFewRuns(usize),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    DivergenceDetected { epoch: usize, step: usize },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
