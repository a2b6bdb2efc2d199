use std::io;

use thiserror::Error;

/// Errors produced anywhere in the index, runtime or experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed input at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    /// The runtime did not reach quiescence before the barrier deadline.
    #[error("pipeline stalled: {0}")]
    Stall(String),

    #[error("query {query_id} incomplete: {detail}")]
    Incomplete { query_id: u64, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}

pub(crate) fn state(msg: impl Into<String>) -> Error {
    Error::State(msg.into())
}
