use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A hyperparameter or configuration value is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was used out of its contract (non-scalar loss, reused tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("metric error: {0}")]
    Metric(String),

    /// A checkpoint or data file is malformed, truncated or incompatible.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
