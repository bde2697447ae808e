use cresp_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config key '{key}': {msg}")]
    Config { key: String, msg: String },

    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("length mismatch: {what} ({left} vs {right})")]
    Length {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("cannot decode observation: {0}")]
    Decode(String),

    #[error("environment misuse: {0}")]
    EnvState(String),

    #[error("replay buffer: {0}")]
    Replay(String),

    #[error("theorem check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
