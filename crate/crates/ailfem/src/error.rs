//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition (bad index, parameter out
    /// of range, mismatched meshes, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The iterative linear solver did not reach the requested tolerance
    /// within its iteration cap.
    #[error("linear solver failed to converge: residual {residual:.3e} after {iterations} iterations (target {target:.3e})")]
    SolverDiverged {
        residual: f64,
        target: f64,
        iterations: usize,
    },

    /// A single linearization step could not be completed (e.g. the Newton
    /// damping control underflowed).
    #[error("linearization step failed: {0}")]
    StepFailed(String),

    /// A cross-check between two independent computations disagreed beyond
    /// its tolerance.
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Parse error in the plain-text mesh format.
    #[error("mesh format error at line {line}: {message}")]
    MeshFormat { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
