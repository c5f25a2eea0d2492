use thiserror::Error;

/// Errors across the whole engine.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parse error in {path} at line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("communication protocol error: {0}")]
    Protocol(String),
    #[error("timed out waiting for rank {peer}")]
    PeerTimeout { peer: u32 },
    #[error("stale cache handle: cache was mutated after the search that produced it")]
    StaleHandle,
    #[error("loss became NaN at epoch {epoch}, minibatch {minibatch} (rank {rank})")]
    NanLoss {
        epoch: usize,
        minibatch: usize,
        rank: u32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
