//! Error types shared by every module of the crate.

use thiserror::Error;

/// Errors surfaced by model parsing, kernel evaluation and sampling.
#[derive(Debug, Error)]
pub enum BridgeError {
    /// Model file violates the schema (missing field, shape mismatch, ...).
    #[error("model schema error: {0}")]
    Schema(String),

    /// Table knots are not strictly increasing or there are fewer than two.
    #[error("invalid table knots: {0}")]
    Knot(String),

    /// The adaptive ODE integrator could not meet its tolerance.
    #[error("ODE solver failure: {0}")]
    Solver(String),

    /// Adaptive quadrature could not meet its tolerance.
    #[error("quadrature failure: {0}")]
    Quad(String),

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix not positive definite: {0}")]
    NotPd(String),

    /// Inversion of a Gamma kernel failed.
    #[error("singular Gamma kernel: {0}")]
    SingularGamma(String),

    /// Kernel evaluation requested inside the guarded band below the horizon.
    #[error("evaluation too close to the horizon: {0}")]
    NearHorizon(String),

    /// Two objects that must share a time grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Finite differencing of a table coefficient left the knot range.
    #[error("differentiation error: {0}")]
    Differentiation(String),
}

pub type Result<T> = std::result::Result<T, BridgeError>;
