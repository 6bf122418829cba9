//! Numerical laboratory for p-capacitary potentials of convex bodies.
//!
//! The crate solves the exterior p-Laplace Dirichlet problem on a truncated
//! grid, estimates p-capacities two independent ways, measures power
//! concavity of the computed potentials, and checks the Brunn-Minkowski
//! inequality for capacity together with its equality case.

pub mod brunn_minkowski;
pub mod capacity;
pub mod concavity;
pub mod error;
pub mod geometry;
pub mod lab;
pub mod linalg;
pub mod model;
pub mod pde_solver;
mod sparse;

pub use error::{Error, Result};
