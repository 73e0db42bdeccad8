//! Error type shared across the crate.

use thiserror::Error;

/// Unified error type for tensor ops, model training, datasets and experiments.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Index out of range (labels, classes, rows).
    #[error("index error: {0}")]
    Index(String),

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite value or other numeric failure, with location.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation invoked on a model in the wrong state (untrained, unfrozen, ...).
    #[error("state error: {0}")]
    State(String),

    /// Training data does not satisfy the training contract.
    #[error("training-data error: {0}")]
    TrainingData(String),

    /// Degenerate geometry: zero-norm embedding, coincident centroids.
    #[error("degeneracy error: {0}")]
    Degenerate(String),

    /// Invalid parameter value (bandwidth, temperature, rates).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Malformed file container; offset is the byte position of the failure.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Dataset content fails validation.
    #[error("data error: {0}")]
    Data(String),

    /// Bad experiment or model configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
