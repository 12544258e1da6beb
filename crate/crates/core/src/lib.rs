//! SHAPE: a learned port-Hamiltonian optimizer for fixed oracle budgets.
//!
//! A planner picks a stage-level anchor, mode and gains every few steps; a
//! local controller shapes mass, damping, coupling and an injected force at
//! every step; a semi-implicit integrator advances the state; an external
//! memory records visited regions and biases the potential away from them.

pub mod baselines;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod local_opt;
pub mod memory;
pub mod oracle;
pub mod policy;
pub mod shape_loop;
pub mod tasks;
pub mod training;

pub use error::{OracleError, ShapeError, TaskError};
