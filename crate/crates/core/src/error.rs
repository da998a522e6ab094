use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum XfileError {
    /// A hyperparameter or argument outside its admissible domain.
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {what} at ({row}, {col})")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },

    /// The latent matrix handed to the posterior is not compatible with the data.
    #[error("latent matrix inconsistent with observations at ({row}, {col}): {reason}")]
    InconsistentLatent {
        row: usize,
        col: usize,
        reason: &'static str,
    },

    #[error("{path}: line {line}, field {field}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: usize,
        message: String,
    },

    #[error("invalid model directory {path}: {message}")]
    Model { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, XfileError>;

impl XfileError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XfileError::Io {
            path: path.into(),
            source,
        }
    }
}
