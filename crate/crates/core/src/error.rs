use std::path::PathBuf;

use hdr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration; `key` is the offending key path.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    /// Unreadable or malformed input data.
    #[error("data error in {}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    /// Non-finite values or other numeric breakdown during a run.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 1,
            Error::Data { .. } | Error::Io { .. } => 2,
            Error::Numeric(_) | Error::Tensor(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
