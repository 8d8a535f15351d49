use thiserror::Error;

use crate::particles::RunReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite velocity for particle {particle} after step {step}: {dump}")]
    NonFinite {
        step: u64,
        particle: usize,
        dump: String,
    },

    #[error("run aborted at step {step}: {reason}")]
    Aborted {
        step: u64,
        reason: String,
        partial: Box<RunReport>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
