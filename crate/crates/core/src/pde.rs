//! Linear advection-diffusion in forward and backward form and the
//! conservative Fokker–Planck stepper.
//!
//! Every step has the IMEX shape `A = I - dt Δ_h` implicit (one FFT solve)
//! and the transport part explicit. With `B(V) = I - dt Adv(V)`:
//!
//! * transport step: `w_new = B(V) A^{-1} w_old + dt f`
//! * density step:   `m_new = A^{-1} (B(V)^T m_old + dt div c)`
//!
//! The density step is the exact transpose of the transport step, so the
//! pairing `<w, m>` is carried through a forward/backward pair up to
//! rounding.

use crate::error::{Error, Result};
use crate::grid::{central_div, inner, max_abs, ScalarField, TimeGrid, TorusGrid, VectorField};
use crate::measures::{DensityField, MASS_TOLERANCE};
use crate::spectral::HeatSolver;
use serde::{Deserialize, Serialize};

/// Largest admissible mass change in one density step.
pub const MASS_DRIFT_LIMIT: f64 = 1e-8;

/// Slack allowed in the discrete maximum principle.
pub const MAX_PRINCIPLE_SLACK: f64 = 1e-10;

/// Stencil for the first-order transport term `V · Dw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Advection {
    /// One-sided differences in the upwind direction; first order in `h`,
    /// monotone when `dt Σ_a max|V_a| <= h`.
    #[default]
    Upwind,
    /// Central differences; second order in `h`, monotone after the heat
    /// solve when `Σ_a max|V_a| sqrt(dt + h^2/4) <= 1`.
    Centered,
}

impl Advection {
    /// Stability measure, `<= 1` when admissible, and the largest `dt`
    /// that would make it so.
    pub fn cfl(self, grid: &TorusGrid, dt: f64, speed: f64) -> (f64, f64) {
        let h = grid.spacing();
        match self {
            Advection::Upwind => {
                let suggested = if speed > 0.0 { h / speed } else { f64::INFINITY };
                (dt * speed / h, suggested)
            }
            Advection::Centered => {
                let suggested = if speed > 0.0 {
                    (1.0 / (speed * speed) - 0.25 * h * h).max(0.0)
                } else {
                    f64::INFINITY
                };
                (speed * (dt + 0.25 * h * h).sqrt(), suggested)
            }
        }
    }

    pub fn check_cfl(self, grid: &TorusGrid, dt: f64, speed: f64) -> Result<()> {
        let (measure, suggested_dt) = self.cfl(grid, dt, speed);
        if measure > 1.0 + 1e-12 {
            return Err(Error::Cfl { measure, suggested_dt });
        }
        Ok(())
    }
}

/// `Σ_a max_x |V_a(x)|` of a component-major spatial slice.
pub fn drift_speed(grid: &TorusGrid, drift: &[f64]) -> f64 {
    let n = grid.node_count();
    (0..grid.dim()).map(|a| max_abs(&drift[a * n..(a + 1) * n])).sum()
}

/// Visits `(i, i+1, i-1)` along `axis` for every node.
#[inline]
fn for_each_line<F: FnMut(usize, usize, usize)>(grid: &TorusGrid, axis: usize, mut f: F) {
    let m = grid.points();
    let stride = grid.stride(axis);
    let block = stride * m;
    for base in (0..grid.node_count()).step_by(block) {
        for i in 0..m {
            let ip = if i + 1 == m { 0 } else { i + 1 };
            let im = if i == 0 { m - 1 } else { i - 1 };
            for s in 0..stride {
                f(base + i * stride + s, base + ip * stride + s, base + im * stride + s);
            }
        }
    }
}

/// One time level of the transport/density pair on a fixed grid and step.
#[derive(Debug, Clone)]
pub struct Stepper {
    grid: TorusGrid,
    dt: f64,
    advection: Advection,
    heat: HeatSolver,
}

impl Stepper {
    pub fn new(grid: TorusGrid, dt: f64, advection: Advection) -> Self {
        Self {
            grid,
            dt,
            advection,
            heat: HeatSolver::new(grid, dt),
        }
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn advection(&self) -> Advection {
        self.advection
    }

    pub fn heat(&self) -> &HeatSolver {
        &self.heat
    }

    /// `out += scale * Adv(V) w`.
    pub fn add_advection(&self, drift: &[f64], w: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.grid.node_count();
        let inv_h = 1.0 / self.grid.spacing();
        for axis in 0..self.grid.dim() {
            let v = &drift[axis * n..(axis + 1) * n];
            match self.advection {
                Advection::Upwind => for_each_line(&self.grid, axis, |i, ip, im| {
                    let vi = v[i];
                    let d = if vi > 0.0 { w[i] - w[im] } else { w[ip] - w[i] };
                    out[i] += scale * vi * d * inv_h;
                }),
                Advection::Centered => for_each_line(&self.grid, axis, |i, ip, im| {
                    out[i] += scale * v[i] * (w[ip] - w[im]) * 0.5 * inv_h;
                }),
            }
        }
    }

    /// `out += scale * Adv(V)^T rho`.
    pub fn add_advection_transpose(&self, drift: &[f64], rho: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.grid.node_count();
        let inv_h = 1.0 / self.grid.spacing();
        for axis in 0..self.grid.dim() {
            let v = &drift[axis * n..(axis + 1) * n];
            match self.advection {
                Advection::Upwind => for_each_line(&self.grid, axis, |i, ip, im| {
                    let own = v[i].abs() * rho[i];
                    let from_right = v[ip].max(0.0) * rho[ip];
                    let from_left = v[im].min(0.0) * rho[im];
                    out[i] += scale * (own - from_right + from_left) * inv_h;
                }),
                Advection::Centered => for_each_line(&self.grid, axis, |i, ip, im| {
                    out[i] -= scale * (v[ip] * rho[ip] - v[im] * rho[im]) * 0.5 * inv_h;
                }),
            }
        }
    }

    /// `w_new = B(V) A^{-1} w_old + dt f`; `w` is overwritten.
    pub fn transport_step(&self, w: &mut [f64], drift: Option<&[f64]>, source: Option<&[f64]>) {
        self.heat.solve(w);
        if let Some(v) = drift {
            let mut adv = vec![0.0; w.len()];
            self.add_advection(v, w, -self.dt, &mut adv);
            for (a, b) in w.iter_mut().zip(&adv) {
                *a += b;
            }
        }
        if let Some(f) = source {
            for (a, b) in w.iter_mut().zip(f) {
                *a += self.dt * b;
            }
        }
    }

    /// `m_new = A^{-1}(B(V)^T m_old + dt div c)`; `m` is overwritten.
    pub fn density_step(&self, m: &mut [f64], drift: Option<&[f64]>, flux: Option<&[f64]>) {
        let n = m.len();
        let mut rhs = m.to_vec();
        if let Some(v) = drift {
            self.add_advection_transpose(v, m, -self.dt, &mut rhs);
        }
        if let Some(c) = flux {
            let mut div = vec![0.0; n];
            central_div(&self.grid, c, &mut div);
            for (r, d) in rhs.iter_mut().zip(&div) {
                *r += self.dt * d;
            }
        }
        self.heat.solve(&mut rhs);
        m.copy_from_slice(&rhs);
    }
}

/// Orientation of a linear parabolic problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// `∂_t w - Δw + V·Dw = f` with data at the initial time.
    Forward,
    /// `-∂_t w - Δw + V·Dw = f` with data at the final time.
    Backward,
}

/// Linear advection-diffusion problem on `[t0, T] x T^d`.
#[derive(Debug, Clone)]
pub struct ParabolicProblem {
    pub direction: Direction,
    pub time: TimeGrid,
    /// Space-time drift; `None` means `V = 0`.
    pub drift: Option<VectorField>,
    /// Space-time source; `None` means `f = 0`.
    pub source: Option<ScalarField>,
    /// Initial data (forward) or terminal data (backward).
    pub data: ScalarField,
    pub advection: Advection,
}

impl ParabolicProblem {
    pub fn new(direction: Direction, time: TimeGrid, data: ScalarField) -> Self {
        Self {
            direction,
            time,
            drift: None,
            source: None,
            data,
            advection: Advection::default(),
        }
    }

    pub fn with_drift(mut self, drift: VectorField) -> Self {
        self.drift = Some(drift);
        self
    }

    pub fn with_source(mut self, source: ScalarField) -> Self {
        self.source = Some(source);
        self
    }

    pub fn with_advection(mut self, advection: Advection) -> Self {
        self.advection = advection;
        self
    }

    fn validate(&self) -> Result<()> {
        let grid = self.data.grid();
        if !self.data.is_spatial() {
            return Err(Error::shape("parabolic data must be a spatial field"));
        }
        let nodes = self.time.nodes();
        if let Some(v) = &self.drift {
            grid.check_same(v.grid())?;
            if v.time_nodes() != nodes {
                return Err(Error::shape(format!(
                    "drift has {} time slices, expected {nodes}",
                    v.time_nodes()
                )));
            }
            if let Some(index) = v.values().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    index,
                    value: v.values()[index],
                });
            }
        }
        if let Some(f) = &self.source {
            grid.check_same(f.grid())?;
            if f.time_nodes() != nodes {
                return Err(Error::shape(format!(
                    "source has {} time slices, expected {nodes}",
                    f.time_nodes()
                )));
            }
        }
        Ok(())
    }
}

/// Solves a [`ParabolicProblem`], checking the CFL condition up front and
/// the discrete maximum principle after every step.
pub fn solve_parabolic(p: &ParabolicProblem) -> Result<ScalarField> {
    p.validate()?;
    let grid = *p.data.grid();
    let dt = p.time.dt();
    let k_steps = p.time.steps();
    let n = grid.node_count();
    if let Some(v) = &p.drift {
        let speed = (0..v.time_nodes())
            .map(|k| drift_speed(&grid, v.slice(k)))
            .fold(0.0, f64::max);
        p.advection.check_cfl(&grid, dt, speed)?;
    }
    let stepper = Stepper::new(grid, dt, p.advection);
    let data_norm = p.data.max_abs();
    let source_norm = p.source.as_ref().map_or(0.0, |f| f.max_abs());
    let mut values = vec![0.0; (k_steps + 1) * n];
    // backward problems run through the same loop with reversed slice order
    let slot = |step: usize| match p.direction {
        Direction::Forward => step,
        Direction::Backward => k_steps - step,
    };
    let mut w = p.data.values().to_vec();
    values[slot(0) * n..(slot(0) + 1) * n].copy_from_slice(&w);
    for step in 1..=k_steps {
        let k = slot(step);
        stepper.transport_step(
            &mut w,
            p.drift.as_ref().map(|v| v.slice(k)),
            p.source.as_ref().map(|f| f.slice(k)),
        );
        let value = max_abs(&w);
        let bound = data_norm + step as f64 * dt * source_norm + MAX_PRINCIPLE_SLACK;
        if !(value <= bound) {
            return Err(Error::MaximumPrinciple { step, value, bound });
        }
        values[k * n..(k + 1) * n].copy_from_slice(&w);
    }
    ScalarField::space_time(grid, p.time, values)
}

/// Forward Fokker–Planck problem `∂_t m - Δm - div(m b) - div c = 0`.
#[derive(Debug, Clone)]
pub struct DivergenceFormProblem {
    pub time: TimeGrid,
    pub initial: DensityField,
    pub drift: Option<VectorField>,
    pub flux: Option<VectorField>,
    pub advection: Advection,
}

impl DivergenceFormProblem {
    pub fn new(time: TimeGrid, initial: DensityField) -> Self {
        Self {
            time,
            initial,
            drift: None,
            flux: None,
            advection: Advection::default(),
        }
    }

    pub fn with_drift(mut self, drift: VectorField) -> Self {
        self.drift = Some(drift);
        self
    }

    pub fn with_flux(mut self, flux: VectorField) -> Self {
        self.flux = Some(flux);
        self
    }

    pub fn with_advection(mut self, advection: Advection) -> Self {
        self.advection = advection;
        self
    }
}

fn check_vector(grid: &TorusGrid, nodes: usize, v: &VectorField, what: &str) -> Result<()> {
    grid.check_same(v.grid())?;
    if v.time_nodes() != nodes {
        return Err(Error::shape(format!(
            "{what} has {} time slices, expected {nodes}",
            v.time_nodes()
        )));
    }
    if let Some(index) = v.values().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            index,
            value: v.values()[index],
        });
    }
    Ok(())
}

/// Density evolution with unit mass per slice. Negative values left by
/// rounding are clamped and the slice renormalized.
pub fn solve_fokker_planck(p: &DivergenceFormProblem) -> Result<ScalarField> {
    march_density(
        p.initial.field(),
        &p.time,
        p.drift.as_ref(),
        p.flux.as_ref(),
        p.advection,
        true,
    )
}

/// Same scheme for signed data (linearized densities): no clamping, the
/// total integral is preserved instead.
pub fn solve_fokker_planck_signed(
    initial: &ScalarField,
    time: &TimeGrid,
    drift: Option<&VectorField>,
    flux: Option<&VectorField>,
    advection: Advection,
) -> Result<ScalarField> {
    march_density(initial, time, drift, flux, advection, false)
}

fn march_density(
    initial: &ScalarField,
    time: &TimeGrid,
    drift: Option<&VectorField>,
    flux: Option<&VectorField>,
    advection: Advection,
    clamp: bool,
) -> Result<ScalarField> {
    let grid = *initial.grid();
    if !initial.is_spatial() {
        return Err(Error::shape("initial density must be a spatial field"));
    }
    let nodes = time.nodes();
    if let Some(v) = drift {
        check_vector(&grid, nodes, v, "drift")?;
        let speed = (0..nodes).map(|k| drift_speed(&grid, v.slice(k))).fold(0.0, f64::max);
        advection.check_cfl(&grid, time.dt(), speed)?;
    }
    if let Some(c) = flux {
        check_vector(&grid, nodes, c, "flux")?;
    }
    let n = grid.node_count();
    let vol = grid.cell_volume();
    let stepper = Stepper::new(grid, time.dt(), advection);
    let mut values = Vec::with_capacity(nodes * n);
    let mut m = initial.values().to_vec();
    values.extend_from_slice(&m);
    for k in 0..time.steps() {
        let before: f64 = m.iter().sum::<f64>() * vol;
        stepper.density_step(&mut m, drift.map(|v| v.slice(k)), flux.map(|c| c.slice(k)));
        let after: f64 = m.iter().sum::<f64>() * vol;
        let drift_mass = (after - before).abs();
        if !(drift_mass <= MASS_DRIFT_LIMIT) {
            return Err(Error::Conservativity {
                step: k + 1,
                drift: drift_mass,
            });
        }
        if clamp {
            clamp_and_renormalize(&mut m, vol, k + 1);
        }
        values.extend_from_slice(&m);
    }
    ScalarField::space_time(grid, *time, values)
}

pub(crate) fn clamp_and_renormalize(m: &mut [f64], vol: f64, step: usize) {
    let lowest = m.iter().cloned().fold(f64::INFINITY, f64::min);
    if lowest < 0.0 {
        if lowest < -1e-12 {
            log::warn!("density step {step}: negative value {lowest:.3e} clamped");
        } else {
            log::debug!("density step {step}: rounding negative {lowest:.3e} clamped");
        }
        m.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let mass: f64 = m.iter().sum::<f64>() * vol;
    if (mass - 1.0).abs() > 0.1 * MASS_TOLERANCE {
        log::debug!("density step {step}: renormalized mass {mass}");
        let s = 1.0 / mass;
        m.iter_mut().for_each(|v| *v *= s);
    }
}

/// Unit-mass density slices of a solved Fokker–Planck field.
pub fn density_slices(m: &ScalarField) -> Result<Vec<DensityField>> {
    (0..m.time_nodes())
        .map(|k| DensityField::new(m.slice_field(k)))
        .collect()
}

/// `|<w(T), ρ(T)> - <w(t0), ρ(t0)>|` for `w` transported backward and `ρ`
/// evolved forward with the same drift and no sources.
pub fn adjoint_consistency_check_with(
    drift: &VectorField,
    advection: Advection,
    terminal: &ScalarField,
    initial: &ScalarField,
) -> Result<f64> {
    let time = *drift
        .time()
        .ok_or_else(|| Error::shape("adjoint check needs a space-time drift"))?;
    let grid = *drift.grid();
    let w = solve_parabolic(
        &ParabolicProblem::new(Direction::Backward, time, terminal.clone())
            .with_drift(drift.clone())
            .with_advection(advection),
    )?;
    let rho = solve_fokker_planck_signed(initial, &time, Some(drift), None, advection)?;
    let k = time.steps();
    let end = inner(&grid, w.slice(k), rho.slice(k));
    let start = inner(&grid, w.slice(0), rho.slice(0));
    Ok((end - start).abs())
}

/// Adjoint check with fixed smooth data: `w(T) = cos 2πx_1 + sin 2π(x_1 + ... + x_d)`
/// and `ρ(t0) = 1 + cos 2πx_1 / 2`.
pub fn adjoint_consistency_check(drift: &VectorField, advection: Advection) -> Result<f64> {
    use std::f64::consts::PI;
    let grid = *drift.grid();
    let terminal = ScalarField::from_fn(grid, |x| {
        (2.0 * PI * x[0]).cos() + (2.0 * PI * x.iter().sum::<f64>()).sin()
    })?;
    let initial = ScalarField::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos())?;
    adjoint_consistency_check_with(drift, advection, &terminal, &initial)
}

/// Smooth space-time drift built from a few random modes, with sup norm
/// at most `amplitude` per component.
pub fn random_smooth_drift(grid: TorusGrid, time: TimeGrid, amplitude: f64, seed: u64) -> Result<VectorField> {
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = grid.dim();
    let n = grid.node_count();
    let modes: Vec<(Vec<f64>, f64, f64, f64)> = (0..2 * d)
        .map(|_| {
            let k: Vec<f64> = (0..d).map(|_| rng.random_range(-2i32..=2) as f64).collect();
            (k, rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..3.0))
        })
        .collect();
    let mut values = Vec::with_capacity(time.nodes() * d * n);
    for k in 0..time.nodes() {
        let t = time.time(k);
        for a in 0..d {
            let (wave, amp, phase, omega) = &modes[2 * a];
            let (wave2, amp2, phase2, _) = &modes[2 * a + 1];
            for i in 0..n {
                let x = grid.coords(i);
                let arg: f64 = wave.iter().zip(&x).map(|(k, v)| k * v).sum();
                let arg2: f64 = wave2.iter().zip(&x).map(|(k, v)| k * v).sum();
                let v = amp * (2.0 * PI * arg + phase + omega * t).cos()
                    + amp2 * (2.0 * PI * arg2 + phase2).sin();
                values.push(0.5 * amplitude * v);
            }
        }
    }
    VectorField::space_time(grid, time, values)
}
