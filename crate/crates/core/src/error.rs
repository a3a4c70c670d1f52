use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// Exact integer arithmetic would overflow.
    #[error("range error: {0}")]
    Range(String),
    /// A numerical routine failed to meet its tolerance.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An enumeration or memory budget was exhausted.
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
