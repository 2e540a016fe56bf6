use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid spec: {0}")]
    Spec(String),

    #[error(transparent)]
    Core(#[from] hbfl_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: &Path, message: impl Into<String>) -> Self {
        CliError::Checkpoint {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}
