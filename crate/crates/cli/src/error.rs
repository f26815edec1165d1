use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    /// Bad invocation or inconsistent artifacts on disk.
    #[error("{0}")]
    Validation(String),

    #[error(transparent)]
    Core(#[from] imago_core::Error),

    #[error(transparent)]
    Nn(#[from] imago_nnet::NnError),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for validation failures, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        let validation = match self {
            CliError::Config(_) | CliError::Validation(_) => true,
            CliError::Core(e) => e.is_validation(),
            CliError::Nn(e) => e.is_validation(),
            CliError::Io { .. } => false,
        };
        if validation {
            2
        } else {
            1
        }
    }
}

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(CliError::Validation(msg.into()))
}
