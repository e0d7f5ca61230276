use thiserror::Error;

/// Errors raised by the solvers, estimators and file readers.
#[derive(Debug, Error)]
pub enum Error {
    /// The matrix to be solved is singular or too badly conditioned.
    #[error("singular system (estimated condition number {condition:e})")]
    SingularSystem { condition: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A transition matrix row is negative or does not sum to one.
    #[error("row {row} of the transition matrix is not a probability vector")]
    NotStochastic { row: usize },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// ‖ΔTP‖ fell below the guard threshold; the gradient step is skipped.
    #[error("curvature step undefined: |delta TP| = {norm:e} below guard")]
    StepUndefined { norm: f64 },

    /// φ_s − γφ_s' vanished for a reachable state pair.
    #[error("degenerate state pair ({from}, {to}): feature difference has zero norm")]
    DegeneratePair { from: usize, to: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
