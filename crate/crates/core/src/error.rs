use alloc::string::String;

/// Everything that can go wrong between model definition and variance
/// computation. Numerical failures are named so callers can tell a broken
/// model from a degenerate estimation problem.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("coefficient `{name}` is not finite at x = {x}, y = {y}")]
    EvaluationFailure { name: &'static str, x: f64, y: f64 },
    #[error("centering condition violated at x = {x}: |∫ b dμ| = {residual:e} exceeds {bound:e}")]
    CenteringViolation { x: f64, residual: f64, bound: f64 },
    #[error("invariant density has mass {mass:e} on the truncated domain")]
    NormalizationFailure { mass: f64 },
    #[error("invariant density grows toward the {side} boundary; fast process is not recurrent")]
    NonErgodic { side: &'static str },
    #[error("cell problem right-hand side has mean {mean:e} under the invariant measure")]
    SolvabilityViolation { mean: f64 },
    #[error("cell problem residual {residual:e} exceeds {bound:e}")]
    ResidualTooLarge { residual: f64, bound: f64 },
    #[error("finite-difference gradient w.r.t. {wrt} coordinate {index} is unstable: {coarse} vs {fine}")]
    GradientInconsistency { wrt: &'static str, index: usize, coarse: f64, fine: f64 },
    #[error("simulation blew up at t = {time} (|state| > 1e12)")]
    BlowUp { time: f64 },
    #[error("{n} observations do not divide {steps} Euler steps")]
    DivisibilityError { steps: usize, n: usize },
    #[error("averaged ODE produced a non-finite value at t = {time}")]
    NonFinite { time: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("covariance weight Q_{k} is degenerate (minimum eigenvalue {min_eigenvalue:e})")]
    WeightDegenerate { k: usize, min_eigenvalue: f64 },
    #[error("optimizer made no progress from any start; the contrast looks degenerate")]
    NoDescent,
    #[error("identifiability failure: {0}")]
    IdentifiabilityFailure(String),
}

pub type Result<T> = core::result::Result<T, Error>;
