use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcmclError {
    #[error("empty distribution")]
    EmptyDistribution,
    #[error("non-finite objective")]
    NonFiniteObjective,
    #[error("tape already consumed by backward")]
    TapeConsumed,
    #[error("out-of-vocabulary id {id} at position {position}")]
    OutOfVocab { id: u32, position: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing loss component: {0}")]
    MissingComponent(&'static str),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DcmclError>;
