use std::path::PathBuf;

use brau_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BrauError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, BrauError>;

impl BrauError {
    pub(crate) fn config(key: &str, msg: impl Into<String>) -> Self {
        BrauError::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        BrauError::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BrauError::Io {
            path: path.into(),
            source,
        }
    }
}
