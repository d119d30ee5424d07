use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("finite-difference probe at coordinate {coord} produced a non-finite value")]
    NonFiniteProbe { coord: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("score requested for t={t} before position i={i}")]
    Ordering { t: usize, i: usize },

    #[error("index {index} out of range 0..{bound} in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("instance too large: {0}")]
    SizeGuard(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("invalid UTF-8 at byte offset {offset}")]
    Encoding { offset: usize },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

/// Typed failures when reading a checkpoint file.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated checkpoint: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
