//! Effective transport tensors of linearized hydrodynamic electron fluids
//! by minimization of a current-based quadratic form over divergence-free
//! currents, together with numerical checks of the structural properties
//! of that minimization.

pub mod cg;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod forms;
pub mod grid;
pub mod io;
pub mod solver;
pub mod transport;

pub use error::{Error, Result};
