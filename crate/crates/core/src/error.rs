use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiscError>;

#[derive(Debug, Error)]
pub enum DiscError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible bundle: {0}")]
    Incompatible(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DiscError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DiscError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DiscError::Config(_) => 2,
            DiscError::Divergence(_) => 3,
            DiscError::Incompatible(_) => 4,
            DiscError::MissingArtifact(_) => 5,
            _ => 1,
        }
    }
}
