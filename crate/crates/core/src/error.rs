use thiserror::Error;

use crate::flow::Trajectory;

pub type Result<T> = std::result::Result<T, AghfError>;

#[derive(Debug, Error)]
pub enum AghfError {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The augmented input matrix `[Fc | F]` is singular or too badly conditioned.
    #[error("affine decomposition failed: reciprocal condition {rcond:.3e} below 1e-12")]
    Decomposition { rcond: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The flow integrator could not make progress. The last accepted
    /// trajectory is attached so callers can inspect it.
    #[error("step size underflow at s = {s:.6e} (h = {step:.3e}); the flow is too stiff for the chosen tolerances")]
    StepUnderflow {
        s: f64,
        step: f64,
        last: Box<Trajectory>,
    },

    #[error("maximum number of steps ({steps}) exhausted at s = {s:.6e}")]
    MaxSteps {
        steps: usize,
        s: f64,
        last: Box<Trajectory>,
    },

    #[error("phase 1 failed: max constraint value {violation:.3e} exceeds feasibility tolerance {tolerance:.1e}")]
    Phase1Failed {
        violation: f64,
        tolerance: f64,
        last: Box<Trajectory>,
    },

    #[error("phase 2 stalled: steady state not reached by s_max (final rhs norm {rhs_norm:.3e})")]
    Phase2Stalled { rhs_norm: f64, last: Box<Trajectory> },

    #[error("closed-loop integration diverged at t = {t:.4} (state norm {norm:.3e})")]
    Divergence { t: f64, norm: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AghfError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        AghfError::Domain(msg.into())
    }
}
