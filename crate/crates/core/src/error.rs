use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient shared trials: need {required}, have {available}")]
    InsufficientShared { required: usize, available: usize },

    #[error("region {region}: expected input width {expected}, got {actual}")]
    RegionWidth {
        region: usize,
        expected: usize,
        actual: usize,
    },

    #[error("sequence too long: {length} positions exceeds max_seq_len {max}")]
    SequenceOverflow { length: usize, max: usize },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
