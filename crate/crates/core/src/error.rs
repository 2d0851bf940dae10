use thiserror::Error;

use crate::model::Trajectory;

/// Errors produced by the shell-model control library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shell index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular Jacobian (condition estimate {condition:e})")]
    SingularJacobian { condition: f64 },

    #[error("split level {beta} lies within {gap:e} of an eigenvalue real part")]
    IllConditionedSplit { beta: f64, gap: f64 },

    #[error("near-defective eigenvalue cluster at index {index} (condition {condition:e})")]
    DefectiveCluster { index: usize, condition: f64 },

    #[error("pair is not stabilizable: mode {mode} (eigenvalue {re:+e}{im:+e}i) fails the Hautus test")]
    Unstabilizable { mode: usize, re: f64, im: f64 },

    #[error("controllability check failed{}", offending_mode.map(|m| format!(" at mode {m}")).unwrap_or_default())]
    Uncontrollable { offending_mode: Option<usize> },

    #[error("attenuation level {gamma} is at or below the critical level: {reason}")]
    GammaBelowCritical { gamma: f64, reason: String },

    #[error("Riccati candidate is indefinite (smallest eigenvalue {min_eigenvalue:e})")]
    IndefiniteSolution { min_eigenvalue: f64 },

    #[error("Riccati iteration stagnated: {0}")]
    RiccatiStagnation(String),

    #[error("finite escape in Riccati ODE at time {time}")]
    FiniteEscape { time: f64 },

    #[error("horizon {horizon} too short for closed-loop margin {margin} (need e^(-margin T) <= {target:e})")]
    HorizonTooShort { horizon: f64, margin: f64, target: f64 },

    #[error("step {dt} too large for scheme {scheme}: dt * nu * k_M^2 = {stiffness} exceeds {limit}")]
    StepTooLarge {
        scheme: &'static str,
        dt: f64,
        stiffness: f64,
        limit: f64,
    },

    #[error("integration unstable at t = {time} (norm growth {growth:e})")]
    Instability {
        time: f64,
        growth: f64,
        partial: Box<Trajectory>,
    },

    #[error("signal never entered the fitting window")]
    EmptyWindow,

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
