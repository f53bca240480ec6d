use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum SfError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("observation {observation} has probability {probability:.3e} <= eps under action {action}; cannot condition on it")]
    ZeroProbabilityObservation {
        action: usize,
        observation: usize,
        probability: f64,
    },

    #[error("core-test matrix is singular within tolerance (smallest/largest singular value = {ratio:.3e})")]
    SingularCoreTests { ratio: f64 },

    #[error("policy-tree enumeration would produce about {approx_count:.3e} trees, over the cap of {cap}")]
    EnumerationTooLarge { approx_count: f64, cap: usize },

    #[error("mixture became degenerate: no tree is consistent with the conditioning history")]
    DegenerateMixture,

    #[error("support query over an empty point set")]
    EmptySet,

    #[error("target is not feasible: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    InfeasibleTarget { residual: f64, tol: f64 },

    #[error("exact 2-d geometry requested for feature dimension {d}; only d = 2 is supported")]
    DimensionUnsupported { d: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dynamic programming did not converge in {iterations} iterations (last support change {delta:.3e})")]
    NonConvergence { iterations: usize, delta: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SfError>;
