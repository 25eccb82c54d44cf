use super::Grid;
use crate::error::{Error, Result};

/// Scalar function sampled on every node of a space-time [`Grid`].
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

/// Scalar function sampled on the spatial nodes of a [`Grid`] (a trace at fixed time).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialField {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at index {pos}")));
        }
        Ok(Self { grid, values })
    }

    /// Wraps values without the finiteness scan; callers guarantee the length.
    pub(crate) fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    /// Samples `f(x, t)` at every node.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64], f64) -> f64) -> Self {
        let ns = grid.spatial_len();
        let mut values = Vec::with_capacity(grid.len());
        for n in 0..grid.time_len() {
            let t = grid.time(n);
            for s in 0..ns {
                let x = grid.spatial_coords(s);
                values.push(f(&x[..grid.dim()], t));
            }
        }
        Self { grid, values }
    }

    /// Repeats a spatial field at every time node.
    pub fn from_spatial(trace: &SpatialField) -> Self {
        let grid = *trace.grid();
        let mut values = Vec::with_capacity(grid.len());
        for _ in 0..grid.time_len() {
            values.extend_from_slice(trace.values());
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, s: usize, n: usize) -> f64 {
        self.values[n * self.grid.spatial_len() + s]
    }

    /// Values at time node `n`.
    pub fn slice(&self, n: usize) -> &[f64] {
        let ns = self.grid.spatial_len();
        &self.values[n * ns..(n + 1) * ns]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        let ns = self.grid.spatial_len();
        &mut self.values[n * ns..(n + 1) * ns]
    }

    /// Spatial trace at time node `n`.
    pub fn trace(&self, n: usize) -> SpatialField {
        SpatialField {
            grid: self.grid,
            values: self.slice(n).to_vec(),
        }
    }

    pub fn set_trace(&mut self, n: usize, trace: &SpatialField) {
        self.slice_mut(n).copy_from_slice(trace.values());
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sub(&self, other: &Field) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Field) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check_same(&self, other: &Field) -> Result<()> {
        if self.grid.same_shape(&other.grid) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("fields live on different grids".into()))
        }
    }
}

impl SpatialField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.spatial_len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} spatial nodes",
                values.len(),
                grid.spatial_len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spatial field".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.spatial_len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.spatial_len())
            .map(|s| {
                let x = grid.spatial_coords(s);
                f(&x[..grid.dim()])
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| s * v).collect(),
        }
    }

    pub fn add(&self, other: &SpatialField) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &SpatialField) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn zip_map(&self, other: &SpatialField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid.spatial_dims() != other.grid.spatial_dims() {
            return Err(Error::ShapeMismatch("spatial fields live on different grids".into()));
        }
        Ok(Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Trapezoid integral over Ω.
    pub fn integrate(&self) -> f64 {
        self.grid
            .spatial_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }
}
