use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("grid too coarse: need at least {needed} points per axis, got {got}")]
    GridTooCoarse { needed: usize, got: usize },

    #[error("covariance factorization failed after jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("singular Gram matrix")]
    SingularGram,

    #[error("rejection budget of {attempts} attempts exhausted (empirical acceptance {acceptance:.3e})")]
    BudgetExhausted { attempts: usize, acceptance: f64 },

    #[error("value {value} at input {index} leaves [-1,1] after layer {layer}")]
    OutOfDomain { layer: usize, index: usize, value: f64 },

    #[error("quadratic program not solved: KKT residual {residual:e} after {iterations} iterations")]
    Infeasible { residual: f64, iterations: usize },

    #[error("zero hits in {n} Monte Carlo draws; use the splitting estimator")]
    ZeroHits { n: usize },

    #[error("splitting starved at level {level} (threshold {threshold})")]
    LevelStarvation { level: usize, threshold: f64 },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("curve is not decreasing: {0}")]
    NotDecreasing(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
