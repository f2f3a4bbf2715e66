use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate fit: relative depth has zero variance on the mask")]
    DegenerateFit,

    #[error("insufficient data: {got} masked pixels, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    #[error("divergence at step {step}: {reason}")]
    Divergence { step: usize, reason: String },

    #[error("non-finite activation in block {block}")]
    Model { block: usize },

    #[error("training error: {0}")]
    Training(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
