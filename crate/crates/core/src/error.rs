//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input in {0}")]
    NonFinite(&'static str),
    #[error("trajectory escaped the integration domain at t = {t:.6e} (last state {state:?})")]
    Escape { t: f64, state: Vec<f64> },
    #[error("no energy shell: E = {e} is below the minimum of the selected Hamiltonian")]
    EmptyShell { e: f64 },
    #[error("energy shell at E = {e} is not compact inside the search box")]
    UnsupportedTopology { e: f64 },
    #[error("curve is not closed: endpoint gap {gap:.3e} exceeds tolerance {tol:.3e}")]
    NotClosed { gap: f64, tol: f64 },
    #[error("orbit lost under energy perturbation (bifurcation)")]
    Bifurcation,
    #[error("iteration did not converge after {iters} steps (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("quadrature refinement did not converge: {0}")]
    Refinement(String),
    #[error("eigenfunction mass {mass:.3e} at the box boundary exceeds {limit:.1e}; enlarge the box")]
    BoxTooSmall { mass: f64, limit: f64 },
    #[error("trace truncation bound {bound:.3e} exceeds the requested tolerance {tol:.3e}")]
    Truncation { bound: f64, tol: f64 },
    #[error("energy window [{lo}, {hi}] is not covered by converged levels (top converged {top})")]
    Coverage { lo: f64, hi: f64, top: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("cache file rejected: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
