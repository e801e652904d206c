use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Non-finite or otherwise out-of-domain numeric input.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    /// A caller broke an operation's precondition (shapes, ranges, empty inputs).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
