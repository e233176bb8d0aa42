//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed inconsistent arguments (dimension mismatch and the like).
    #[error("argument error: {0}")]
    Argument(String),

    /// Input outside the domain an oracle can evaluate (NaN/inf coordinates).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or unsatisfiable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A reference/oracle computation failed to converge.
    #[error("oracle failure: {0}")]
    OracleFailure(String),

    /// Estimated contraction factor is not in (0, 1).
    #[error("contraction failure: {0}")]
    ContractionFailure(String),

    /// Iterative solver ran out of iterations before meeting its tolerance.
    #[error("convergence error: {msg} (residual {residual:.3e})")]
    Convergence { msg: String, residual: f64 },

    /// Model has no finite minimizer.
    #[error("unbounded model: {0}")]
    Unbounded(String),

    /// Stacked-state layout does not match what an operation expects.
    #[error("layout error: {0}")]
    Layout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: config/schema problems exit 2,
    /// everything else exits 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
