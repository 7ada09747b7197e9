use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or widths that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument outside the domain of a function (log of a non-positive value, τ ≤ 0, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A forward pass overflowed to NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    /// A checkpoint, dataset or configuration that disagree with each other.
    #[error("mismatch: {0}")]
    Mismatch(String),
    /// A malformed binary file; `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
