use thiserror::Error;

/// Errors surfaced by tensor math, model assembly, training, and data loading.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation produced NaN or Inf. Training fails fast on these.
    #[error("numeric fault in {op}: non-finite value produced")]
    NumericFault { op: &'static str },

    /// An API was called in a way its contract forbids.
    #[error("usage: {0}")]
    Usage(String),

    /// A configuration value is missing, malformed, or inconsistent.
    #[error("config: {0}")]
    Config(String),

    /// Input data is malformed or out of range.
    #[error("data: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Load-time checkpoint failures, kept distinct so callers can tell a stale
/// format from a damaged file from a model/architecture disagreement.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("file truncated while reading {reading}")]
    Truncated { reading: &'static str },

    #[error("tensor `{name}`: stored shape {found:?} does not match expected {expected:?}")]
    ShapeDisagreement {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
}

pub type Result<T> = std::result::Result<T, Error>;
