//! Error type shared across the solver library.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DfpError>;

#[derive(Debug, Error)]
pub enum DfpError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by {what} ({context})")]
    NonFinite { what: String, context: String },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    #[error("non-convex Hamiltonian for player {player}: {detail}")]
    NonConvex { player: usize, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("game construction failed: {0}")]
    Construction(String),

    #[error("derivation check failed: {0}")]
    Derivation(String),

    #[error("simulation failed at step {step}: {detail}")]
    Simulation { step: usize, detail: String },

    #[error("BSDE rollout failed at step {step}: {detail}")]
    Rollout { step: usize, detail: String },

    #[error("training aborted at step {step}: {detail}")]
    Training { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DfpError {
    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        DfpError::Shape {
            what: what.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn non_finite(what: impl Into<String>, context: impl Into<String>) -> Self {
        DfpError::NonFinite {
            what: what.into(),
            context: context.into(),
        }
    }
}
