use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SemcError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl SemcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SemcError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = SemcError> = std::result::Result<T, E>;
