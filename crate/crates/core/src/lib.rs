//! Non-equilibrium steady states of oscillator lattices.

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod harmonic_exact;
pub mod kmp;
pub mod lattice;
pub mod observables;
pub mod pool;
pub mod rng;
pub mod thermostats;
pub mod transport;

pub use error::{Error, Result};
