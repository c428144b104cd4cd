use std::path::PathBuf;

use thiserror::Error;

use crate::train::checkpoint::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("image decode error in {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("barrier timeout: received {received} of {expected} worker gradient maps")]
    BarrierTimeout { expected: usize, received: usize },

    #[error("worker {worker} failed on shard {shard}: {source}")]
    Worker {
        worker: usize,
        shard: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training aborted at step {step}: {reason}")]
    NumericAbort {
        step: u64,
        reason: String,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("attention map of {elements} elements exceeds the cap of {cap}; raise the pool size (currently {pool_size})")]
    AttentionTooLarge {
        elements: u128,
        cap: u128,
        pool_size: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Param(_) | Error::AttentionTooLarge { .. } => 2,
            Error::Data(_) | Error::Decode { .. } | Error::Io { .. } | Error::Checkpoint(_) => 3,
            Error::NonFinite { .. } | Error::NumericAbort { .. } => 4,
            Error::Worker { source, .. } => match source.exit_code() {
                1 => 4,
                code => code,
            },
            _ => 1,
        }
    }
}
