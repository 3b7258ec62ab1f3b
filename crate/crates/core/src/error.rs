use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument outside the documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Tensor or matrix shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value went non-finite or a numerical routine could not proceed.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An input violated a structural invariant (e.g. teacher rows not normalized).
    #[error("invariant violated: {0}")]
    Invariant(String),

    /// Corpus content is malformed (missing sample, empty caption, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Configuration is inconsistent or references an unknown key.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step} (batch {batch_ids:?}): {detail}")]
    NonFiniteLoss {
        step: u64,
        batch_ids: Vec<String>,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
