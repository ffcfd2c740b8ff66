//! Crate-wide error type. Numerical routines return `Result` instead of
//! panicking so callers (CLI, training loop) can surface actionable messages.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix not positive definite: leading minor {pivot} is not positive")]
    NotPositiveDefinite { pivot: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value ({what}) at t={t}, x={x}, y={y}")]
    NonFinite { what: String, t: f64, x: f64, y: f64 },

    #[error("thinning bound violated at t={t}: intensity {intensity} exceeds bound {bound}")]
    BoundViolation { t: f64, intensity: f64, bound: f64 },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("{path}:{line}: {msg}")]
    InvalidRecord { path: String, line: usize, msg: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
