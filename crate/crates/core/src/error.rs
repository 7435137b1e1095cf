use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("causality violated: key position {key} is after query position {query}")]
    Causality { query: usize, key: usize },
    #[error("original index {index} does not follow last inserted index {last}")]
    Order { index: u64, last: u64 },
    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid cache policy `{0}` (expected dense | window:y | recompute:L | sink:x+y)")]
    Policy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
