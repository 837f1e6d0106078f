use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0} stage missing")]
    StageMissing(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("busy: {0}")]
    Busy(String),

    #[error("hash mismatch for {path}: manifest records {expected}, file has {actual}")]
    HashMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("no run manifest in {}", .0.display())]
    NoManifest(PathBuf),

    #[error(transparent)]
    Core(#[from] exagree_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 2 for problems with the request or the run directory, 1 for failures
    /// inside the pipeline.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if !e.is_validation() => 1,
            CliError::Io(_) | CliError::Internal(_) => 1,
            _ => 2,
        }
    }
}

impl From<exagree_core::PreferenceError> for CliError {
    fn from(e: exagree_core::PreferenceError) -> Self {
        CliError::Core(e.into())
    }
}
