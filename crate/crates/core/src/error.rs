use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("operator too large to materialize densely ({size} > {limit}); {hint}")]
    TooLarge {
        size: usize,
        limit: usize,
        hint: &'static str,
    },

    #[error("measurement is outside the range of the operator (relative residual {0:.3e})")]
    OutsideRange(f64),

    #[error("not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("tape does not belong to the supplied parameters")]
    StaleTape,

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::Divergence(_)
                | Error::NotPsd(_)
                | Error::OutsideRange(_)
                | Error::CheckFailed(_)
        )
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
