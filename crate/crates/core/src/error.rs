//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by planning, numerics, model and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or batch shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Text input could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A numeric argument is outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training diverged or a model internal check failed.
    #[error("model error: {0}")]
    Model(String),

    /// Malformed file contents (checkpoints, plans, WAV, manifests).
    #[error("format error: {0}")]
    Format(String),

    /// Chat-completion endpoint failure with fallback disabled.
    #[error("llm error: {0}")]
    Llm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn range(msg: impl Into<String>) -> Self {
        Error::Range(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
