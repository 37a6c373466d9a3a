use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training aborted; `last_good` holds the parameters before the failing step.
    #[error("training diverged at frame {frame}: loss {loss}")]
    Diverged {
        frame: usize,
        loss: f64,
        last_good: Box<crate::attention::AttentionParams<f64>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
