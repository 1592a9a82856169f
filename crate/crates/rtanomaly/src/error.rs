//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide error enum. The CLI maps these onto stable exit codes:
/// configuration problems exit 2, data problems exit 3, checkpoint
/// problems exit 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (ragged rows, bad fields, length mismatches).
    #[error("data error: {0}")]
    Data(String),

    /// Data file could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint missing, corrupt, or of an unsupported version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Operation called before its prerequisites (e.g. scoring with an
    /// unfitted normalizer).
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
