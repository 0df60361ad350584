use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("threshold error: {0}")]
    Threshold(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("non-finite loss at epoch {epoch}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        epoch: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error("i/o error on {path}: {source}")]
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
}
