//! Numerical laboratory for second-order mean field games systems with zero
//! Neumann boundary data.
//!
//! The crate discretizes the coupled Hamilton–Jacobi–Bellman / Fokker–Planck
//! pair on rectangular domains, solves the conventional forward–backward data
//! configuration by Picard iteration, evaluates Carleman weighted integral
//! inequalities term by term, runs Hölder stability experiments for
//! terminal-data and initial-data problems, and reconstructs solutions from
//! such data by Carleman-weighted least squares.

pub mod error;
pub mod forward_solver;
pub mod grid;
pub mod linalg;
pub mod mfg_system;
pub mod sparse;
pub mod spectral;
pub mod carleman;
pub mod scenario;
pub mod stability_lab;
pub mod reconstruct;

pub use error::{Error, Result};
pub use grid::{Field, Grid, NormKind, Region, SpatialField};
