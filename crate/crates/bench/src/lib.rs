//! Fixtures shared by the kernel benchmarks.

use std::f64::consts::PI;

use mfglab::grid::GridSpec;
use mfglab::mfg_system::ManufacturedProblem;
use mfglab::scenario::ScenarioSpec;
use mfglab::{Field, Grid};

/// Reference manufactured problem on `[0,1]` with `n` space and `nt` time nodes.
pub fn reference(n: usize, nt: usize) -> ManufacturedProblem {
    let spec = GridSpec { extents: vec![(0.0, 1.0)], nodes: vec![n], horizon: 1.0, time_nodes: nt };
    ScenarioSpec::reference(spec).build().expect("reference scenario")
}

/// Smooth Neumann-compatible field on the unit square over `[0,1]`.
pub fn cosine_field_2d(n: usize, nt: usize) -> Field {
    let g = Grid::new(&[(0.0, 1.0), (0.0, 1.0)], &[n, n], 1.0, nt).expect("grid");
    Field::from_fn(g, |x, t| (PI * x[0]).cos() * (2.0 * PI * x[1]).cos() * (1.0 + t))
}
