use thiserror::Error;

/// Errors raised by the kernels, the model and the I/O helpers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: step {index} outside 1..={max}")]
    Index { index: usize, max: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("reporting error: {0}")]
    Reporting(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
