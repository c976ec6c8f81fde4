use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("a {bits}-bit quantizer has fewer than two levels")]
    DegenerateQuantizer { bits: u32 },
    #[error("quantizer range must be positive and finite, got {0}")]
    InvalidRange(f64),
    #[error("non-finite quantizer input {0}")]
    NonFiniteInput(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimError { expected: usize, got: usize },
    #[error("simulation diverged at step {step} (tau = {tau})")]
    Divergence {
        step: u64,
        tau: f64,
        /// Everything recorded before the blow-up.
        partial: Box<crate::simulator::Trajectory>,
    },
    #[error("ODE integration diverged at tau = {tau}")]
    OdeDivergence {
        tau: f64,
        partial: Vec<crate::ode::OdeState>,
    },
    #[error("time step violates the stability limit; use dt <= {suggested_dt}")]
    CflError { suggested_dt: f64 },
    #[error("no interior solution: |c| = {c} is at or beyond the reachable range {limit}")]
    NoInteriorSolution { c: f64, limit: f64 },
    #[error("no fixed point found: {0}")]
    NoFixedPointFound(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
