//! Tensor-product space-time grids over `Ω × (t0, t1)` with `Ω` a rectangle.
//!
//! Fields are stored time-major: the value at spatial node `s` and time node
//! `n` lives at `n * spatial_len + s`, and spatial nodes are ordered with the
//! first axis fastest (`s = i + nx * j`). All quadrature is the tensor
//! trapezoid rule; all derivatives are second-order finite differences with
//! mirror ghost nodes at the spatial boundary (zero Neumann data).

mod field;
mod norm;
mod stencil;

pub use field::{Field, SpatialField};
pub use norm::{norm, spatial_norm, NormKind};
pub(crate) use norm::constituents;
pub use stencil::{Derivative, DiffOps, SpatialDerivative};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when deciding whether a time lies on the grid.
const TIME_SLACK: f64 = 1e-9;

/// One spatial axis `[lo, hi]` sampled at `nodes` equispaced points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn spacing(&self) -> f64 {
        self.length() / (self.nodes - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    /// Trapezoid weights along this axis.
    pub fn weights(&self) -> Vec<f64> {
        let h = self.spacing();
        let mut w = vec![h; self.nodes];
        w[0] = 0.5 * h;
        w[self.nodes - 1] = 0.5 * h;
        w
    }
}

/// Uniform tensor grid over `Ω × [t0, t1]`, `Ω` of dimension 1 or 2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    axes: [Axis; 2],
    t0: f64,
    t1: f64,
    nt: usize,
}

/// Serializable description of a [`Grid`] on `Ω × [0, horizon]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub extents: Vec<(f64, f64)>,
    pub nodes: Vec<usize>,
    pub horizon: f64,
    pub time_nodes: usize,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        Grid::new(&self.extents, &self.nodes, self.horizon, self.time_nodes)
    }
}

/// Integration region inside the grid's time span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Region {
    /// The whole cylinder `Ω × [t0, t1]`.
    Full,
    /// `Ω × [t_lo, t_hi]`, endpoints snapped to time nodes.
    Slab { t_lo: f64, t_hi: f64 },
    /// The spatial slice `Ω × {t}`, snapped to the nearest time node.
    At(f64),
}

impl Grid {
    /// Builds the grid over `Ω × [0, horizon]`.
    pub fn new(extents: &[(f64, f64)], nodes: &[usize], horizon: f64, time_nodes: usize) -> Result<Self> {
        if extents.is_empty() || extents.len() > 2 {
            return Err(Error::InvalidGrid(format!(
                "spatial dimension must be 1 or 2, got {}",
                extents.len()
            )));
        }
        if extents.len() != nodes.len() {
            return Err(Error::InvalidGrid(format!(
                "{} extents but {} node counts",
                extents.len(),
                nodes.len()
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("time horizon must be positive, got {horizon}")));
        }
        if time_nodes < 3 {
            return Err(Error::InvalidGrid(format!("need at least 3 time nodes, got {time_nodes}")));
        }
        let mut axes = [Axis { lo: 0.0, hi: 1.0, nodes: 1 }; 2];
        for (d, (&(lo, hi), &n)) in extents.iter().zip(nodes).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidGrid(format!("axis {d}: extent [{lo}, {hi}] is not an interval")));
            }
            if n < 3 {
                return Err(Error::InvalidGrid(format!("axis {d}: need at least 3 nodes, got {n}")));
            }
            axes[d] = Axis { lo, hi, nodes: n };
        }
        Ok(Self {
            dim: extents.len(),
            axes,
            t0: 0.0,
            t1: horizon,
            nt: time_nodes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn axis(&self, d: usize) -> &Axis {
        assert!(d < self.dim, "axis {d} out of range for a {}-d grid", self.dim);
        &self.axes[d]
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes[..self.dim]
    }

    pub fn h(&self, d: usize) -> f64 {
        self.axis(d).spacing()
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / (self.nt - 1) as f64
    }

    pub fn t_start(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t1
    }

    /// Length of the time span.
    pub fn duration(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn time_len(&self) -> usize {
        self.nt
    }

    pub fn spatial_len(&self) -> usize {
        self.axes().iter().map(|a| a.nodes).product()
    }

    pub fn len(&self) -> usize {
        self.spatial_len() * self.nt
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, n: usize) -> f64 {
        if n + 1 == self.nt {
            self.t1
        } else {
            self.t0 + n as f64 * self.dt()
        }
    }

    /// Node counts of the spatial axes, first axis first.
    pub fn spatial_dims(&self) -> Vec<usize> {
        self.axes().iter().map(|a| a.nodes).collect()
    }

    /// Spatial dims followed by the time dimension.
    pub fn tensor_dims(&self) -> Vec<usize> {
        let mut dims = self.spatial_dims();
        dims.push(self.nt);
        dims
    }

    /// Per-axis node indices of spatial node `s`.
    pub fn spatial_multi_index(&self, s: usize) -> [usize; 2] {
        let nx = self.axes[0].nodes;
        if self.dim == 1 {
            [s, 0]
        } else {
            [s % nx, s / nx]
        }
    }

    /// Coordinates of spatial node `s` (unused trailing entries are zero).
    pub fn spatial_coords(&self, s: usize) -> [f64; 2] {
        let idx = self.spatial_multi_index(s);
        let mut x = [0.0; 2];
        for (d, a) in self.axes().iter().enumerate() {
            x[d] = a.coord(idx[d]);
        }
        x
    }

    /// Whether spatial node `s` lies on `∂Ω`.
    pub fn is_boundary(&self, s: usize) -> bool {
        let idx = self.spatial_multi_index(s);
        self.axes()
            .iter()
            .enumerate()
            .any(|(d, a)| idx[d] == 0 || idx[d] + 1 == a.nodes)
    }

    /// Tensor trapezoid weights on Ω.
    pub fn spatial_weights(&self) -> Vec<f64> {
        let wx = self.axes[0].weights();
        if self.dim == 1 {
            return wx;
        }
        let wy = self.axes[1].weights();
        let mut w = Vec::with_capacity(wx.len() * wy.len());
        for &b in &wy {
            for &a in &wx {
                w.push(a * b);
            }
        }
        w
    }

    /// |Ω|.
    pub fn omega_measure(&self) -> f64 {
        self.axes().iter().map(Axis::length).product()
    }

    /// Index of the time node nearest to `t`.
    pub fn snap(&self, t: f64) -> Result<usize> {
        let slack = TIME_SLACK * self.duration().max(1.0) + 1e-12 * self.dt();
        if !t.is_finite() || t < self.t0 - slack || t > self.t1 + slack {
            return Err(Error::RegionOutOfRange { t, t0: self.t0, t1: self.t1 });
        }
        let n = ((t - self.t0) / self.dt()).round();
        Ok((n.max(0.0) as usize).min(self.nt - 1))
    }

    /// Inclusive time-node range `[n_lo, n_hi]` covered by a region.
    pub fn time_range(&self, region: Region) -> Result<(usize, usize)> {
        match region {
            Region::Full => Ok((0, self.nt - 1)),
            Region::Slab { t_lo, t_hi } => {
                if t_lo > t_hi {
                    return Err(Error::InvalidParameter(format!("slab [{t_lo}, {t_hi}] is reversed")));
                }
                Ok((self.snap(t_lo)?, self.snap(t_hi)?))
            }
            Region::At(t) => {
                let n = self.snap(t)?;
                Ok((n, n))
            }
        }
    }

    /// Trapezoid weights in time over `[n_lo, n_hi]` (zero outside).
    pub fn time_weights(&self, n_lo: usize, n_hi: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.nt];
        if n_lo >= n_hi {
            return w;
        }
        let dt = self.dt();
        for wn in &mut w[n_lo..=n_hi] {
            *wn = dt;
        }
        w[n_lo] = 0.5 * dt;
        w[n_hi] = 0.5 * dt;
        w
    }

    /// Grid covering only the time nodes `[n_lo, n_hi]`.
    pub fn sub_time(&self, n_lo: usize, n_hi: usize) -> Result<Self> {
        if n_hi >= self.nt || n_hi < n_lo + 2 {
            return Err(Error::EmptySlab {
                t_lo: self.time(n_lo.min(self.nt - 1)),
                t_hi: self.time(n_hi.min(self.nt - 1)),
            });
        }
        Ok(Self {
            t0: self.time(n_lo),
            t1: self.time(n_hi),
            nt: n_hi - n_lo + 1,
            ..*self
        })
    }

    /// Description of a grid starting at `t = 0`.
    pub fn spec(&self) -> GridSpec {
        GridSpec {
            extents: self.axes().iter().map(|a| (a.lo, a.hi)).collect(),
            nodes: self.spatial_dims(),
            horizon: self.t1,
            time_nodes: self.nt,
        }
    }

    /// Same spatial grid with a different time sampling of `[0, horizon]`.
    pub fn with_time(&self, horizon: f64, time_nodes: usize) -> Result<Self> {
        let extents: Vec<(f64, f64)> = self.axes().iter().map(|a| (a.lo, a.hi)).collect();
        Grid::new(&extents, &self.spatial_dims(), horizon, time_nodes)
    }

    pub(crate) fn same_shape(&self, other: &Grid) -> bool {
        self.dim == other.dim && self.spatial_dims() == other.spatial_dims() && self.nt == other.nt
    }

    /// Tensor trapezoid quadrature of `field` over `region`.
    pub fn integrate(&self, field: &Field, region: Region) -> Result<f64> {
        if !self.same_shape(field.grid()) {
            return Err(Error::ShapeMismatch("field does not live on this grid".into()));
        }
        let (n_lo, n_hi) = self.time_range(region)?;
        let ws = self.spatial_weights();
        let slice_integral = |n: usize| -> f64 { field.slice(n).iter().zip(&ws).map(|(v, w)| v * w).sum() };
        match region {
            Region::At(_) => Ok(slice_integral(n_lo)),
            _ => {
                let wt = self.time_weights(n_lo, n_hi);
                Ok((n_lo..=n_hi).map(|n| wt[n] * slice_integral(n)).sum())
            }
        }
    }

    /// Snapped `(t_lo, t_hi)` that a slab request actually covers.
    pub fn snapped_slab(&self, t_lo: f64, t_hi: f64) -> Result<(f64, f64)> {
        let (a, b) = self.time_range(Region::Slab { t_lo, t_hi })?;
        Ok((self.time(a), self.time(b)))
    }
}

/// Restricts a field to the time slab `[t_lo, t_hi]` (endpoints snapped to nodes).
///
/// Returns the restricted field and the snapped endpoints.
pub fn restrict_time(field: &Field, t_lo: f64, t_hi: f64) -> Result<(Field, (f64, f64))> {
    let grid = field.grid();
    let (n_lo, n_hi) = grid.time_range(Region::Slab { t_lo, t_hi })?;
    let sub = grid.sub_time(n_lo, n_hi).map_err(|_| Error::EmptySlab { t_lo, t_hi })?;
    let ns = grid.spatial_len();
    let values = field.values()[n_lo * ns..(n_hi + 1) * ns].to_vec();
    Ok((Field::new(sub, values)?, (sub.t_start(), sub.t_end())))
}
