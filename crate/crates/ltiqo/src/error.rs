//! Shared error type for the crate.

use num_complex::Complex64;
use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, transfer evaluation, gradient
/// assembly, and the optimizer.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix dimensions are inconsistent with the declared (n, m, p).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// An operation required a stable system but the spectral abscissa is
    /// nonnegative.
    #[error("system is not asymptotically stable (spectral abscissa {abscissa:.6e})")]
    Unstable { abscissa: f64 },

    /// A matrix expected to be symmetric positive definite failed its
    /// factorization.
    #[error("matrix {name} is not positive definite")]
    NotPositiveDefinite { name: &'static str },

    /// Shift coincides (numerically) with an eigenvalue, so the resolvent
    /// solve is singular.
    #[error("resolvent is singular at shift {shift}")]
    SingularShift { shift: Complex64 },

    /// Output index out of range.
    #[error("output index {index} out of range for p = {p}")]
    OutputIndex { index: usize, p: usize },

    /// The requested operation supports only a single quadratic output.
    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),

    /// A singular value needed for a gradient is not simple enough to be
    /// differentiable; the caller should perturb the frequency and retry.
    #[error(
        "degenerate singular value at index {index}: gap {gap:.3e} below {threshold:.3e}"
    )]
    DegenerateSingularValue {
        index: usize,
        gap: f64,
        threshold: f64,
    },

    /// SVD or eigenvalue iteration did not converge.
    #[error("matrix decomposition did not converge: {0}")]
    DecompositionFailed(&'static str),

    /// The parameter vector does not match its layout.
    #[error("invalid parameter vector: {0}")]
    InvalidTheta(String),

    /// Configuration value out of range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Time integration produced a non-finite state.
    #[error("simulation diverged at t = {t:.6} (non-finite state)")]
    SimulationDiverged { t: f64 },

    /// Line search could not find an acceptable step.
    #[error("line search failed after {backtracks} backtracks")]
    LineSearchFailed { backtracks: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}
