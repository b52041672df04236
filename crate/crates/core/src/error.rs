use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("forgetting factor must lie in (0, 1), got {0}")]
    InvalidForgettingFactor(f64),

    #[error("malformed FOFE code: {0}")]
    MalformedCode(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("fragment string has {len} characters but the widest filter needs {width}")]
    FragmentTooShort { len: usize, width: usize },

    #[error("invalid fragment [{start}, {end}) for a sentence of {len} tokens")]
    InvalidFragment { start: usize, end: usize, len: usize },

    #[error("forward cache does not match the batch: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("overlapping gold spans in sentence {sentence}: [{a_start}, {a_end}) and [{b_start}, {b_end})")]
    OverlappingGold {
        sentence: usize,
        a_start: usize,
        a_end: usize,
        b_start: usize,
        b_end: usize,
    },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("bad embedding header: {0}")]
    BadHeader(String),

    #[error("duplicate token {0:?}")]
    DuplicateToken(String),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("unknown profile {0:?}")]
    UnknownProfile(String),

    #[error("config: {0}")]
    Config(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    IoPlain(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
