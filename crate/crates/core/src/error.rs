use thiserror::Error;

use crate::equilibrium::Classification;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Picard iteration of the implicit scheme did not settle.
    #[error("fixed-point iteration did not converge at time step {step} after {iterations} iterations (last change {change:.3e})")]
    NonConvergence {
        step: usize,
        iterations: usize,
        change: f64,
    },

    #[error("exponent {exponent:.1} exceeds the overflow guard at time step {step} (q = {q}, j = {j}); the price grid is too wide for these parameters")]
    Overflow {
        step: usize,
        q: i64,
        j: usize,
        exponent: f64,
    },

    #[error("transformed value underflow at time step {step}: {detail}; use the finite-difference solver for these parameters")]
    Underflow { step: usize, detail: String },

    #[error("tridiagonal system row {row} is not strictly diagonally dominant")]
    NotDiagonallyDominant { row: usize },

    #[error("transition matrix fails grid calibration: total-variation distance {tv:.3e} exceeds {threshold:.1e}")]
    GridCalibration { tv: f64, threshold: f64 },

    #[error("no eigenvalue bracket found after {} probes: {history:?}", history.len())]
    BracketNotFound { history: Vec<(f64, Classification)> },

    #[error("shooting failed: {0}")]
    Shooting(String),

    #[error("policy produced no finite quote at tau = {tau}, q = {q}, s = {s}")]
    QuoteUnavailable { tau: f64, q: i64, s: f64 },

    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("config hash mismatch: {expected} vs {found} (use --force to override)")]
    HashMismatch { expected: String, found: String },

    #[error("malformed surface file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical schemes, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::Overflow { .. }
                | Error::Underflow { .. }
                | Error::NotDiagonallyDominant { .. }
                | Error::GridCalibration { .. }
                | Error::BracketNotFound { .. }
                | Error::Shooting(_)
                | Error::QuoteUnavailable { .. }
        )
    }
}
