use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}: backward called before a training-mode forward pass")]
    GraphNotBuilt(&'static str),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] imago_core::Error),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl NnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NnError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than the
    /// environment.
    pub fn is_validation(&self) -> bool {
        match self {
            NnError::Io { .. } => false,
            NnError::Core(e) => e.is_validation(),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
