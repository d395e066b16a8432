use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("unsupported format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("parse error at {path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that originate in the filesystem rather than in the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
