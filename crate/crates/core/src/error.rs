use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported audio format in {path}: {detail}")]
    AudioFormat { path: PathBuf, detail: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("checkpoint member `{member}`: {detail}")]
    Checkpoint { member: String, detail: String },

    #[error("parameter `{name}` mismatch: {detail}")]
    ParamMismatch { name: String, detail: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
