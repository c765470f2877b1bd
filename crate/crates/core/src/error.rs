use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image extents do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Invalid configuration value (camera profile, training config, ...).
    #[error("config error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Bad argument (empty inputs and the like).
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed file contents.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corruption detected in {path}: {detail}")]
    Corruption { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad data on disk rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. } | Error::Corruption { .. } | Error::Io { .. }
        )
    }
}
