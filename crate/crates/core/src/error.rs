use thiserror::Error;

/// Errors produced by configuration validation, solvers, and evaluators.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be symmetric positive definite failed its Cholesky
    /// factorization, which is the operational definition of "not SPD" here.
    #[error("{name} is not symmetric positive definite")]
    NotSpd { name: &'static str },

    #[error("dimension mismatch: {context}")]
    Dimension { context: String },

    #[error("invalid configuration: {context}")]
    Config { context: String },

    /// A moment of total order above the supported maximum was requested.
    /// Orders are never silently truncated.
    #[error("moment order {order} exceeds supported maximum {max}")]
    UnsupportedOrder { order: usize, max: usize },

    /// The exponential tilt makes the flat-prior posterior non-integrable.
    #[error("posterior tilt is not integrable for beta = {beta:?}")]
    NonIntegrableTilt { beta: Vec<f64> },

    /// A finite-space problem whose stated invariants do not hold (baseline
    /// weights not a strictly positive probability vector, or moments not
    /// centered under the baseline).
    #[error("infeasible finite-space problem: {context}")]
    Infeasible { context: String },

    #[error("unsupported operation: {context}")]
    Unsupported { context: String },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(context: impl Into<String>) -> Self {
        Error::Dimension { context: context.into() }
    }

    pub fn config(context: impl Into<String>) -> Self {
        Error::Config { context: context.into() }
    }
}
