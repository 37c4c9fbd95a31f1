use std::path::PathBuf;

use routecast_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("incompatible: {0}")]
    Compat(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; batch {batch:?} losses {losses:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch: Vec<String>,
        losses: Vec<f64>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
