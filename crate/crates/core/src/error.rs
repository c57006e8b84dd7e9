use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("internal consistency error: {0}")]
    Consistency(String),
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid gradient check: {0}")]
    InvalidCheck(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("compatibility error: {0}")]
    Compatibility(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
