use std::path::PathBuf;

use thiserror::Error;

/// Failures of the command-line layer, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad usage, configuration or input files (exit code 2).
    #[error("{0}")]
    Config(String),
    /// Numerical or runtime failure during compute (exit code 1).
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }
}

/// Errors from the model: numerical ones are runtime failures, the rest are
/// caused by inputs.
impl From<koopkal_core::Error> for CliError {
    fn from(e: koopkal_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Runtime(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
