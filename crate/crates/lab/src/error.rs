use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?} as {expected}")]
    ConfigValue { key: String, value: String, expected: &'static str },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    /// Non-finite loss; the message names the dump with the offending batch.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(#[from] tssm_core::Error),
    #[error(transparent)]
    Env(#[from] hidden_order::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
