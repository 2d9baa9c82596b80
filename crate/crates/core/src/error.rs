use thiserror::Error;

use crate::solver::SolverError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {time} lies outside the basis support [{lower}, {upper}]")]
    Domain { time: f64, lower: f64, upper: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },

    #[error("site data contains no events")]
    NoEvents,

    #[error(transparent)]
    NonConvergence(#[from] SolverError),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("inference error: {reason} (condition number {condition:e})")]
    Inference { reason: String, condition: f64 },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for solver failures, which callers usually report differently
    /// from bad input.
    pub fn is_non_convergence(&self) -> bool {
        matches!(self, Error::NonConvergence(_))
    }
}
