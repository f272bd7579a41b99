//! Energy transition densities of driven Hamiltonian systems.
//!
//! Three independent pathways to the smoothed transition density
//! P_{EE'}(τ, ε): an exact eigenbasis double sum, an exact double Fourier
//! transform of the compound propagator trace, and a semiclassical sum over
//! closed compound orbits built from segments on the initial and driven
//! energy shells.

pub mod dynamics;
pub mod quantum;
pub mod section;
pub mod semiclassics;
pub mod orbits;
pub mod error;
pub mod ode;
pub mod system;

pub use error::{Error, Result};
pub use system::{PhaseFunction, PhasePoint, SmoothingWindow, SystemSpec, TransitionQuery};
