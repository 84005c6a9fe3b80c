//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not satisfy an operation's contract.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A numeric argument is out of range, non-finite, or otherwise unusable.
    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// An object is used outside its lifecycle contract (stale cache,
    /// schedule stepped past its horizon, mismatched mask, ...).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A configuration is internally inconsistent or incomplete.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A serialized container is malformed (bad magic, truncation,
    /// unknown dtype, dangling mask reference, trailing bytes, ...).
    #[error("format error: {0}")]
    Format(String),

    /// The combination of scheme, pattern, or dtype has no packed layout.
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Training produced a non-finite loss. The loop stops at `step`;
    /// the caller gets the last finite state via [`crate::train::DivergenceError`].
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
