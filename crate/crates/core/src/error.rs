use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid map: {0}")]
    Map(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {layer}: expected {expected:?}, got {got:?}")]
    Shape {
        layer: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("episode already finished")]
    EpisodeFinished,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("rollout archive format error: {0}")]
    Archive(String),

    #[error("torn write detected in `{0}`")]
    TornWrite(String),

    #[error("worker {worker} failed: {source}")]
    Worker {
        worker: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
