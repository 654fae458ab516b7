use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("misuse: {0}")]
    Misuse(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward: {0}")]
    Backward(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
