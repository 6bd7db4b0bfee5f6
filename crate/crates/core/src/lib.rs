//! Constrained two-well lattice chains.
//!
//! A two-dimensional triangular-lattice configuration is generated by one atomic
//! chain and a field of elongation vectors. This crate evaluates the quartic
//! two-well Hamiltonian on such chains, finds twin-like local minimizers with a
//! damped Newton method, and estimates boundary and internal layer energies.

pub mod analysis;
pub mod banded;
pub mod energy;
pub mod error;
pub mod gamma;
pub mod lattice;
pub mod minimize;
pub mod summation;
pub mod wells;

pub use error::{Error, Result};
