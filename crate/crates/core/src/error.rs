use std::path::PathBuf;

use thiserror::Error;

/// Every failure surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke a documented precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A character id fell outside the vocabulary.
    #[error("vocab error: id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// The data handed to a training or evaluation routine is unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A numeric operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Malformed input file.
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
