use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("character {ch:?} at position {position} is not representable by the vocabulary")]
    UnrepresentableInput { ch: char, position: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("record has {count} tokens; a 16-bit mask plane holds at most 65535")]
    PixelValueOverflow { count: usize },

    #[error("i/o failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec failure on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("malformed document {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("record is missing field `{0}`")]
    MissingField(&'static str),

    #[error("mask has no active cells at feature resolution")]
    EmptyMask,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite function value at coordinate {coordinate}")]
    NumericalFailure { coordinate: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("unknown token id {id} (vocabulary size {vocab_size})")]
    UnknownToken { id: usize, vocab_size: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("loss weights must be non-negative and not all zero")]
    InvalidWeights,

    #[error("answer index {index} out of range for answer length {len}")]
    Index { index: usize, len: usize },

    #[error("no usable token-mask pairs")]
    EmptyBatch,

    #[error("query {query} has no relevant gallery item")]
    UndefinedAp { query: usize },

    #[error("labels contain a single class")]
    DegenerateLabels,

    #[error("invalid synthetic corpus spec: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
