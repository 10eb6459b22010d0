use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("pairing error for model `{model}`: missing entries {missing:?}")]
    Pairing { model: String, missing: Vec<String> },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("training diverged at epoch {epoch}, step {step} (loss = {loss})")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing analysis stage `{stage}`")]
    Dependency { stage: String },

    #[error("credential error: {0}")]
    Credential(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {message}; body starts with {excerpt:?}")]
    Protocol { message: String, excerpt: String },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Shape(_)
            | Error::Pairing { .. }
            | Error::Argument(_)
            | Error::Dependency { .. }
            | Error::Format(_)
            | Error::Truncated { .. }
            | Error::Corruption(_)
            | Error::Json { .. } => 2,
            Error::Divergence { .. } | Error::Numeric(_) | Error::UndefinedStatistic(_) => 3,
            Error::Io { .. } | Error::Image(_) => 4,
            Error::Credential(_) | Error::Transport(_) | Error::Protocol { .. } => 5,
        }
    }
}
