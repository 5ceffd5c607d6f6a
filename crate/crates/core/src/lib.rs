//! Quantum-phase determination for a continuously measured Bose-Hubbard
//! chain from the power spectrum of its measurement record.

pub mod chain;
pub mod cli;
pub mod error;
pub mod fock;
pub mod io;
pub mod lattice;
pub mod model;
pub mod perturbative;
pub mod spectrum;
pub mod sweep;
pub mod trajectory;

pub use error::{Error, Result};
