use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("mask selects no patches: {0}")]
    EmptySelection(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    Capacity { len: usize, max: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
