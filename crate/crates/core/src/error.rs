use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum VarlError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("prefix state is outside the enumerated table (step {step}, code {code})")]
    UnknownState { step: usize, code: u64 },

    #[error("schedule for {tag} is not a prefix of the given schedule")]
    NotAPrefix { tag: String },

    #[error("enumeration too large: {0}")]
    TooLarge(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("site ({0}, {1}) is outside the grid")]
    OutOfBounds(usize, usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = VarlError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> VarlError {
    VarlError::InvalidConfig(msg.into())
}
