//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by quadrature construction, problem evaluation, the
/// nonlinear solvers, and the integration driver.
#[derive(Debug, Error)]
pub enum Error {
    /// A state left the domain of the Hamiltonian (e.g. a logarithm was
    /// asked for a non-positive component).
    #[error("state outside problem domain: component {index} = {value:.6e}")]
    Domain { index: usize, value: f64 },

    /// Requested node count outside the supported range 1..=32.
    #[error("unsupported quadrature node count k = {k} (supported: 1..=32)")]
    NodeCount { k: usize },

    /// Invalid (k, s) pair for a method tableau.
    #[error("invalid tableau parameters (k = {k}, s = {s}): need 1 <= s <= k <= 32")]
    TableauParams { k: usize, s: usize },

    /// A matrix that must be factored was (numerically) singular.
    #[error("singular matrix in {0}")]
    Singular(&'static str),

    /// The QR eigenvalue iteration did not settle.
    #[error("eigenvalue iteration failed to converge for a {n}x{n} matrix")]
    EigenConvergence { n: usize },

    /// Unknown benchmark problem name.
    #[error("unknown problem preset `{0}` (expected lv2, lv3 or harmonic)")]
    UnknownPreset(String),

    /// The method requires at least one Casimir but the system has none.
    #[error("method requires a system with at least one Casimir")]
    MissingCasimirs,

    /// The Casimir correction direction is numerically degenerate.
    #[error(
        "degenerate Casimir direction {index}: |pi0^T Btilde gamma0| = {value:.6e} below threshold"
    )]
    DegenerateCasimirDirection { index: usize, value: f64 },

    /// A step inside a multi-step integration did not converge.
    #[error(
        "step {step} failed to converge: residual {residual:.6e} after {iterations} iterations"
    )]
    StepFailed {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    /// A hard error occurred inside a multi-step integration.
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    /// Caller-side misuse of a driver operation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
