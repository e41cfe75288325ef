use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PiernError>;

#[derive(Debug, Error)]
pub enum PiernError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("loss function is not deterministic: {first} != {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown expert `{0}`")]
    UnknownExpert(String),

    #[error("duplicate expert id `{0}`")]
    DuplicateExpert(String),

    #[error("expert `{0}` is not frozen")]
    NotFrozen(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("context overflow: {len} tokens exceed context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("anchor at byte {0} is not on a token boundary")]
    AnchorNotOnBoundary(usize),

    #[error("registry mismatch: expected {expected}, found {found}")]
    RegistryMismatch { expected: String, found: String },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("unsupported checkpoint format `{0}`")]
    UnsupportedVersion(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PiernError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PiernError::Io {
            path: path.into(),
            source,
        }
    }
}
