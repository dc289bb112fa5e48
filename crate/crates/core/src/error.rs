use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    TraceParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("trace set {label}: {message}")]
    TraceSet { label: String, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid policy token `{token}`: {message}")]
    Policy { token: String, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("nothing to run")]
    EmptyGrid,

    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
