use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown corpus source `{0}` (no difficulty level mapped)")]
    UnknownSource(String),

    #[error("invalid UTF-8 in {source_name} line {line}")]
    Decode { source_name: String, line: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("all positions carry the ignore label; loss is undefined")]
    EmptyLoss,

    #[error("non-finite loss {loss} for task {task} at step {step}")]
    NonFinite { task: String, step: u64, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 2 for configuration
    /// problems, 3 for data problems, 4 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
