use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error in {}: byte {offset}: {msg}", path.display())]
    ParseAt { path: PathBuf, offset: u64, msg: String },

    #[error("parse error in {}: line {line}: {msg}", path.display())]
    ParseLine { path: PathBuf, line: usize, msg: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("utterance sets differ (missing: {missing:?}, extra: {extra:?})")]
    Mismatch { missing: Vec<String>, extra: Vec<String> },

    #[error("parameter names differ (missing: {missing:?}, extra: {extra:?})")]
    ParamNames { missing: Vec<String>, extra: Vec<String> },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
