//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation was called out of order (backward before forward,
    /// gradient field from an untrained critic, ...).
    #[error("invalid state: {0}")]
    State(String),

    /// A non-finite value surfaced where finite arithmetic was required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A time argument fell outside the clamped integration range where the
    /// score transform or the memoryless noise level is singular.
    #[error("time {t} outside the valid range [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    /// Closed-form merge target has no mass (e.g. product of disjoint supports).
    #[error("degenerate target: {0}")]
    Degenerate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn non_finite(ctx: impl Into<String>) -> Self {
        Error::NonFinite(ctx.into())
    }

    pub fn unsupported(msg: impl Into<String>) -> Self {
        Error::Unsupported(msg.into())
    }
}
