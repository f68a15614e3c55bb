//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A forward op produced (or was handed) a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A parameter is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Unknown word or out-of-range token id.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// An inconsistent or empty scoring/tuning configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint or dataset file.
    #[error("format error: {0}")]
    Format(String),

    /// Training diverged or was handed an unusable dataset.
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
