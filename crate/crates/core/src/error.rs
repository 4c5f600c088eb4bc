use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value or dimension is outside the accepted range.
    #[error("invalid parameter: {0}")]
    Param(String),
    /// A computation produced a non-finite value or hit a singularity.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A file or checkpoint does not match the expected layout.
    #[error("format error: {0}")]
    Format(String),
    /// Text contains a token missing from the vocabulary.
    #[error("tokenization error: {0}")]
    Tokenize(String),
    /// Run configuration failed validation.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}

pub(crate) fn format<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
