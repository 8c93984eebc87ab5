use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the editing stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
    #[error("missing frame {index} in {dir}")]
    MissingFrame { dir: PathBuf, index: usize },
    #[error("expert failure: {0}")]
    Expert(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("model was not fine-tuned on this source (checkpoint {expected}, source {actual})")]
    SourceMismatch { expected: String, actual: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors that come from numerical blow-up rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
