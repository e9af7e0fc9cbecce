use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image at {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid dataset index: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("preprocessing error: {0}")]
    Preprocess(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by inputs or configuration rather than by
    /// numerical breakdown inside the optimizer.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Training { .. } | Error::Loss(_))
    }
}
