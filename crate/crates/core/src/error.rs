//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("timestep {t} out of range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("token {0:?} not in vocabulary")]
    UnknownToken(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dataset error at {path}: {message}")]
    Dataset { path: String, message: String },

    #[error("non-finite loss at step {step} ({component})")]
    NonFiniteLoss { step: u64, component: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}
