//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector has norm <= 1e-12 and cannot be normalized")]
    ZeroNorm,
    #[error("non-finite value produced: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("temperature must be positive, got {0}")]
    TemperatureNonPositive(f64),
    #[error("matching plan entry {entry} is outside branch range {branches}")]
    PlanOutOfRange { entry: usize, branches: usize },
    #[error("cardinality mismatch: {0}")]
    CardinalityMismatch(String),
    #[error("need at least 2 texts for similarity statistics, got {0}")]
    TooFewTexts(usize),
    #[error("view {0} is not supported by the caption grammar")]
    UnsupportedView(String),
    #[error("plan mode {mode} incompatible with M={texts} texts and H={branches} branches")]
    PlanCardinality {
        mode: String,
        texts: usize,
        branches: usize,
    },
    #[error("norm-max fusion requires gallery statistics")]
    MissingGalleryStats,
    #[error("branch subset must be non-empty")]
    EmptySubset,
    #[error("branch {branch} out of range for {branches} branches")]
    BranchOutOfRange { branch: usize, branches: usize },
    #[error("retrieval sizes disagree: {0}")]
    SizeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("image file missing: {0}")]
    MissingImage(PathBuf),
    #[error("manifest line {line}: text tokenizes to {len} tokens, limit {max}")]
    TextTooLong { line: usize, len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
