//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the barrier-learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("integration diverged: non-finite state encountered")]
    IntegrationDiverged,

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("sampling exhausted for region `{region}`: accepted {accepted}/{needed} after {attempts} candidates")]
    SamplingExhausted {
        region: String,
        accepted: usize,
        needed: usize,
        attempts: usize,
    },

    #[error("calibration set too small: n={n} with alpha={alpha}, m={m} gives quantile index l={l}")]
    InsufficientCalibration {
        n: usize,
        alpha: f64,
        m: usize,
        l: usize,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("safety QP infeasible at state {state:?} (constraint slack {slack:.6e})")]
    QpInfeasible { state: Vec<f64>, slack: f64 },

    #[error("invalid comparison: {0}")]
    InvalidComparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
