use thiserror::Error;

use crate::diffcore::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("prompt: {0}")]
    Prompt(String),
    #[error("layout: {0}")]
    Layout(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Whether this failure came from NaN/Inf or divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Diff(DiffError::NonFinite { .. }))
    }
}
