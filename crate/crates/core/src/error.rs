use thiserror::Error;

/// Errors produced by the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed inconsistent shapes, out-of-range parameters or a
    /// malformed configuration.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A dataset file failed to load or validate; the message names the
    /// offending entry.
    #[error("load error: {0}")]
    Load(String),

    /// A metric is undefined for the given inputs (e.g. Hausdorff distance
    /// of an empty point set).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Numerical failure during optimization (NaN gradients, diverging loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
