//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or mask shapes do not line up for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation precondition was violated (non-scalar loss, empty
    /// dataset, invalid label value, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// PTA is undefined because the slice has no myocardium (TA + ELA = 0).
    #[error("PTA undefined: trabecular and external-layer areas are both zero")]
    UndefinedPta,

    /// Degenerate numeric input, e.g. a constant image fed to normalize.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Malformed file contents.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
