//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("preprocess error: {0}")]
    Preprocess(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("checkpoint error at {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("training aborted at epoch {epoch}, batch {batch}: {msg}")]
    Training { epoch: usize, batch: usize, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("attribution error: {0}")]
    Attribution(String),

    #[error("visualization error: {0}")]
    Visualization(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for user/input problems, 1 for
    /// internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dataset(_)
            | Error::Config(_)
            | Error::Image { .. }
            | Error::Checkpoint { .. }
            | Error::InvalidArgument(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}
