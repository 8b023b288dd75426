//! Periodic space-time grids and the discrete fields that live on them.
//!
//! The state space is the unit torus `T^d = R^d / Z^d` discretized with the
//! same number of points `M` on every axis, so the spacing is exactly `1/M`.
//! Fields are dense row-major arrays: the last spatial axis is contiguous and
//! time-dependent fields stack `K + 1` spatial slices.

mod io;
mod norms;
mod ops;

pub use io::{read_field, write_field, write_slice_csv, FieldHeader};
pub use norms::{
    dual_norm_probe, dual_norm_probe_with, holder_norm_probe, holder_norm_probe_with_stride,
    holder_seminorm_on, trig_test_norm, DEFAULT_DUAL_MAX_FREQ,
};
pub use ops::{
    central_diff, central_div, geodesic_distance, gradient, inner, interpolate,
    interpolate_slice, laplacian, max_abs, min_image,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Uniform grid on the unit torus with `points` nodes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    points: usize,
}

impl TorusGrid {
    pub const MIN_POINTS: usize = 8;

    pub fn new(dim: usize, points: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("torus dimension must be >= 1"));
        }
        if points < Self::MIN_POINTS {
            return Err(Error::param(format!(
                "points per axis must be >= {}, got {points}",
                Self::MIN_POINTS
            )));
        }
        let nodes = (points as u128).checked_pow(dim as u32);
        if nodes.is_none_or(|n| n > u32::MAX as u128) {
            return Err(Error::param(format!("grid {points}^{dim} is too large")));
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.points as f64
    }

    pub fn node_count(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Distance in the flat index between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.points.pow((self.dim - 1 - axis) as u32)
    }

    /// Index along `axis` of the node with flat index `flat`.
    #[inline]
    pub fn axis_index(&self, flat: usize, axis: usize) -> usize {
        (flat / self.stride(axis)) % self.points
    }

    pub fn unflatten(&self, mut flat: usize, out: &mut [usize]) {
        for axis in (0..self.dim).rev() {
            out[axis] = flat % self.points;
            flat /= self.points;
        }
    }

    /// Flat index of a multi-index; every component is wrapped modulo `M`.
    pub fn flatten(&self, idx: &[isize]) -> usize {
        let m = self.points as isize;
        idx.iter()
            .fold(0usize, |acc, &i| acc * self.points + i.rem_euclid(m) as usize)
    }

    /// Neighbour of `flat` shifted by `delta` nodes along `axis`, wrapping.
    #[inline]
    pub fn shift(&self, flat: usize, axis: usize, delta: isize) -> usize {
        let stride = self.stride(axis);
        let i = ((flat / stride) % self.points) as isize;
        let j = (i + delta).rem_euclid(self.points as isize) as usize;
        flat - (i as usize) * stride + j * stride
    }

    pub fn coord(&self, flat: usize, axis: usize) -> f64 {
        self.axis_index(flat, axis) as f64 * self.spacing()
    }

    pub fn coords(&self, flat: usize) -> Vec<f64> {
        (0..self.dim).map(|a| self.coord(flat, a)).collect()
    }

    /// Samples `f` at every node.
    pub fn sample<F: Fn(&[f64]) -> f64>(&self, f: F) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        (0..self.node_count())
            .map(|flat| {
                for (a, xa) in x.iter_mut().enumerate() {
                    *xa = self.coord(flat, a);
                }
                f(&x)
            })
            .collect()
    }

    pub(crate) fn check_same(&self, other: &TorusGrid) -> Result<()> {
        if self != other {
            return Err(Error::shape(format!(
                "grid mismatch: {}^{} vs {}^{}",
                self.points, self.dim, other.points, other.dim
            )));
        }
        Ok(())
    }
}

/// Uniform time grid `t_k = t0 + k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, horizon: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && horizon.is_finite()) || horizon <= t0 {
            return Err(Error::param(format!(
                "time grid needs t0 < T, got [{t0}, {horizon}]"
            )));
        }
        if steps == 0 {
            return Err(Error::param("time grid needs at least one step"));
        }
        Ok(Self { t0, horizon, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    /// The grid restricted to nodes `k..=steps`.
    pub fn tail(&self, k: usize) -> Result<Self> {
        if k >= self.steps {
            return Err(Error::param(format!(
                "tail start {k} must be < steps {}",
                self.steps
            )));
        }
        Ok(Self {
            t0: self.time(k),
            horizon: self.horizon,
            steps: self.steps - k,
        })
    }

    pub fn check_contains(&self, t: f64) -> Result<()> {
        let slack = 1e-12 * (1.0 + self.horizon.abs());
        if t < self.t0 - slack || t > self.horizon + slack || !t.is_finite() {
            return Err(Error::OutOfRange {
                t,
                t0: self.t0,
                horizon: self.horizon,
            });
        }
        Ok(())
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Scalar function on the torus, optionally over a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: TorusGrid,
    time: Option<TimeGrid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn spatial(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::shape(format!(
                "expected {} values, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self {
            grid,
            time: None,
            values,
        })
    }

    pub fn space_time(grid: TorusGrid, time: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.node_count() * time.nodes();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} values, got {}",
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self {
            grid,
            time: Some(time),
            values,
        })
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(grid: TorusGrid, f: F) -> Result<Self> {
        Self::spatial(grid, grid.sample(f))
    }

    pub fn constant(grid: TorusGrid, c: f64) -> Result<Self> {
        Self::spatial(grid, vec![c; grid.node_count()])
    }

    /// Stacks spatial slices, one per time node.
    pub fn from_slices(grid: TorusGrid, time: TimeGrid, slices: &[Vec<f64>]) -> Result<Self> {
        if slices.len() != time.nodes() {
            return Err(Error::shape(format!(
                "expected {} slices, got {}",
                time.nodes(),
                slices.len()
            )));
        }
        let values = slices.concat();
        Self::space_time(grid, time, values)
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn time(&self) -> Option<&TimeGrid> {
        self.time.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_spatial(&self) -> bool {
        self.time.is_none()
    }

    pub fn time_nodes(&self) -> usize {
        self.time.map_or(1, |t| t.nodes())
    }

    /// Spatial slice at time node `k` (the only slice for spatial fields).
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.node_count();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn slice_field(&self, k: usize) -> ScalarField {
        ScalarField {
            grid: self.grid,
            time: None,
            values: self.slice(k).to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.values)
    }

    /// Cell-volume weighted integral of every slice.
    pub fn integral(&self, k: usize) -> f64 {
        self.slice(k).iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn scaled(&self, a: f64) -> ScalarField {
        ScalarField {
            grid: self.grid,
            time: self.time,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    /// `a * self + b * other` on identical layouts.
    pub fn combine(&self, a: f64, other: &ScalarField, b: f64) -> Result<ScalarField> {
        self.grid.check_same(&other.grid)?;
        if self.values.len() != other.values.len() {
            return Err(Error::shape("fields have different time layouts"));
        }
        Ok(ScalarField {
            grid: self.grid,
            time: self.time,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }
}

/// `d`-component vector field stored component-major per time node.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: TorusGrid,
    time: Option<TimeGrid>,
    values: Vec<f64>,
}

impl VectorField {
    pub fn spatial(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.dim() * grid.node_count();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} vector values, got {}",
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self {
            grid,
            time: None,
            values,
        })
    }

    pub fn space_time(grid: TorusGrid, time: TimeGrid, values: Vec<f64>) -> Result<Self> {
        let expected = grid.dim() * grid.node_count() * time.nodes();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} vector values, got {}",
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Self {
            grid,
            time: Some(time),
            values,
        })
    }

    /// Same vector field at every node of `time`.
    pub fn constant(grid: TorusGrid, time: Option<TimeGrid>, v: &[f64]) -> Result<Self> {
        if v.len() != grid.dim() {
            return Err(Error::shape("constant vector has wrong dimension"));
        }
        let n = grid.node_count();
        let per_slice: Vec<f64> = v.iter().flat_map(|&c| std::iter::repeat_n(c, n)).collect();
        let slices = time.map_or(1, |t| t.nodes());
        let values = per_slice.repeat(slices);
        match time {
            Some(t) => Self::space_time(grid, t, values),
            None => Self::spatial(grid, values),
        }
    }

    pub fn zeros(grid: TorusGrid, time: Option<TimeGrid>) -> Self {
        let slices = time.map_or(1, |t| t.nodes());
        Self {
            grid,
            time,
            values: vec![0.0; grid.dim() * grid.node_count() * slices],
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn time(&self) -> Option<&TimeGrid> {
        self.time.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn time_nodes(&self) -> usize {
        self.time.map_or(1, |t| t.nodes())
    }

    /// Component `axis` at time node `k`.
    pub fn component(&self, k: usize, axis: usize) -> &[f64] {
        let n = self.grid.node_count();
        let d = self.grid.dim();
        let start = (k * d + axis) * n;
        &self.values[start..start + n]
    }

    /// All components at time node `k`, component-major.
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.grid.node_count() * self.grid.dim();
        &self.values[k * n..(k + 1) * n]
    }

    pub fn max_norm(&self) -> f64 {
        let n = self.grid.node_count();
        let d = self.grid.dim();
        let mut best = 0.0f64;
        for k in 0..self.time_nodes() {
            let s = self.slice(k);
            for i in 0..n {
                let norm2: f64 = (0..d).map(|a| s[a * n + i].powi(2)).sum();
                best = best.max(norm2.sqrt());
            }
        }
        best
    }
}
