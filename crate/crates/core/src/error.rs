use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("context window overflow: need {needed} tokens, window is {window}")]
    ContextOverflow { needed: usize, window: usize },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("fast path requires a single adapted block, got {0}")]
    UnsupportedFastPath(usize),
    #[error("adaptation session already restored")]
    StaleSession,
    #[error("answer span not found in prompt: {0:?}")]
    SpanNotFound(String),
    #[error("no swap candidate available for entity {0:?}")]
    SwapUnavailable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
