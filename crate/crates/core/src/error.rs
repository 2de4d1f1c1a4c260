use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("lookup miss: {0}")]
    LookupMiss(String),

    #[error("transport error after {retries} retries: {reason}")]
    Transport { retries: u32, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("allocation error: {0}")]
    Allocation(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training error at epoch {epoch}, step {step}: {reason}")]
    Training {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
