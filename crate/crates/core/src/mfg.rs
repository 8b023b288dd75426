//! Coupled HJB/Fokker–Planck systems with local or mollified coupling, the
//! first- and second-order linearized systems and the stability gap
//! between the two couplings.
//!
//! The discrete system on `t_n = t0 + n dt`, `A = I - dt Δ_h`:
//!
//! ```text
//! u^K = G,   ū^n = A^{-1} u^{n+1},   u^n = ū^n - dt H(x, Dū^n) + dt F(m^n)
//! m^0 = m0,  m^{n+1} = A^{-1} [m^n + dt div(m^n D_pH(x, Dū^n))]
//! ```
//!
//! with central differences `D`, `div = -D^T`. The linearized solvers
//! differentiate exactly this map, so finite differences of the nonlinear
//! solver converge to them at first order in the perturbation size.

use crate::coupling::{HamiltonianSpec, LocalCoupling, MollifiedCoupling};
use crate::error::{Error, Result};
use crate::grid::{central_diff, central_div, inner, ScalarField, TimeGrid, TorusGrid};
use crate::measures::{w1_circle, DensityField};
use crate::pde::{clamp_and_renormalize, Advection, Stepper, MASS_DRIFT_LIMIT};
use serde::{Deserialize, Serialize};

/// Coupling used on the right-hand side of the HJB equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "epsilon")]
pub enum CouplingKind {
    /// `F(x, m(t, x))`.
    Local,
    /// `F^ε(x, m(t))` with the given mollifier radius.
    Mollified(f64),
}

/// Fixed-point controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfgOptions {
    /// Picard relaxation `λ` in `m <- (1 - λ) m + λ FP(HJB(m))`.
    pub damping: f64,
    pub max_iters: usize,
    /// Tolerance on `||FP(HJB(m)) - m||_∞`.
    pub tol: f64,
    /// Relative tolerance of the linearized solvers.
    pub linear_tol: f64,
}

impl Default for MfgOptions {
    fn default() -> Self {
        Self {
            damping: 0.25,
            max_iters: 2000,
            tol: 1e-10,
            linear_tol: 1e-12,
        }
    }
}

/// Resolved coupling operator on a fixed grid.
#[derive(Debug, Clone)]
pub enum CouplingOperator {
    Local { base: LocalCoupling, source: Vec<f64> },
    Mollified(MollifiedCoupling),
}

impl CouplingOperator {
    pub fn new(base: LocalCoupling, grid: TorusGrid, kind: CouplingKind) -> Result<Self> {
        Ok(match kind {
            CouplingKind::Local => CouplingOperator::Local {
                base,
                source: grid.sample(|x| base.source_at(x)),
            },
            CouplingKind::Mollified(eps) => CouplingOperator::Mollified(MollifiedCoupling::with_epsilon(base, grid, eps)?),
        })
    }

    pub fn apply(&self, m: &[f64]) -> Vec<f64> {
        match self {
            CouplingOperator::Local { base, source } => m
                .iter()
                .zip(source)
                .map(|(&v, s)| base.linear * v + base.cubic * v * v * v + s)
                .collect(),
            CouplingOperator::Mollified(fc) => fc.apply(m),
        }
    }

    /// `δF/δm (m)(ρ)`.
    pub fn derivative(&self, m: &[f64], rho: &[f64]) -> Vec<f64> {
        match self {
            CouplingOperator::Local { base, .. } => m.iter().zip(rho).map(|(&a, &r)| base.dm(&[], a) * r).collect(),
            CouplingOperator::Mollified(fc) => fc.derivative(m, rho),
        }
    }

    /// `δ²F/δm² (m)(ρ, ρ)`.
    pub fn second_derivative(&self, m: &[f64], rho: &[f64]) -> Vec<f64> {
        match self {
            CouplingOperator::Local { base, .. } => {
                m.iter().zip(rho).map(|(&a, &r)| base.dmm(&[], a) * r * r).collect()
            }
            CouplingOperator::Mollified(fc) => fc.second_derivative(m, rho),
        }
    }
}

/// Data, discretization and solver controls of an MFG system.
#[derive(Debug, Clone)]
pub struct MfgSystem {
    pub hamiltonian: HamiltonianSpec,
    pub coupling: LocalCoupling,
    pub grid: TorusGrid,
    pub horizon: f64,
    /// Number of steps on `[0, horizon]`; shorter horizons reuse the step.
    pub steps: usize,
    pub options: MfgOptions,
}

/// Solution of the nonlinear system.
#[derive(Debug, Clone)]
pub struct MfgSolution {
    pub u: ScalarField,
    pub m: ScalarField,
    pub kind: CouplingKind,
    pub iterations: usize,
    pub fixed_point_residual: f64,
    pub residual_history: Vec<f64>,
    /// `D ū^n` for `n < K`, component-major per slice.
    gradients: Vec<Vec<f64>>,
}

impl MfgSolution {
    pub fn time(&self) -> &TimeGrid {
        self.u.time().expect("space-time solution")
    }

    pub fn grid(&self) -> &TorusGrid {
        self.u.grid()
    }

    /// `u(t0, ·)`, the master field evaluated at the initial measure.
    pub fn value_at_start(&self) -> ScalarField {
        self.u.slice_field(0)
    }

    pub fn density(&self, k: usize) -> Result<DensityField> {
        DensityField::new(self.m.slice_field(k))
    }

    /// Gradient of the diffused value `ū^n` driving step `n`.
    pub fn gradient(&self, n: usize) -> &[f64] {
        &self.gradients[n]
    }

    pub fn manifest(&self, options: &MfgOptions) -> MfgManifest {
        let time = self.time();
        MfgManifest {
            dim: self.grid().dim(),
            points: self.grid().points(),
            steps: time.steps(),
            t0: time.t0(),
            horizon: time.horizon(),
            kind: self.kind,
            damping: options.damping,
            tol: options.tol,
            iterations: self.iterations,
            residual_history: self.residual_history.clone(),
            stability: None,
        }
    }
}

/// JSON record of one solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfgManifest {
    pub dim: usize,
    #[serde(rename = "M")]
    pub points: usize,
    #[serde(rename = "K")]
    pub steps: usize,
    pub t0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub kind: CouplingKind,
    pub damping: f64,
    pub tol: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub stability: Option<StabilityReport>,
}

/// Order of a linearized solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearOrder {
    First,
    Second,
}

/// `(z, ρ)` for the first order, `(w, μ)` for the second.
#[derive(Debug, Clone)]
pub struct LinearizedSolution {
    pub z: ScalarField,
    pub rho: ScalarField,
    pub order: LinearOrder,
    pub iterations: usize,
    pub damping: f64,
    /// `D z̄^n = D A^{-1} z^{n+1}` for `n < K`.
    gradients: Vec<Vec<f64>>,
}

impl LinearizedSolution {
    pub fn gradient(&self, n: usize) -> &[f64] {
        &self.gradients[n]
    }
}

/// Gaps between the mollified and the local solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub epsilon: f64,
    /// `max_n ||u^ε(t_n) - u(t_n)||_∞`.
    pub sup_u_gap: f64,
    /// `max_n ||D(u^ε - u)(t_n)||_{L2}`.
    pub grad_gap_l2: f64,
    /// Space-time `L2` norm of `m^ε - m`.
    pub m_gap_l2: f64,
    /// `Σ_n dt <F^ε(m^ε) - F(m), m^ε - m>`.
    pub duality_pairing: f64,
    pub iterations_local: usize,
    pub iterations_mollified: usize,
}

fn gradient_into(grid: &TorusGrid, f: &[f64], out: &mut [f64]) {
    let n = grid.node_count();
    for axis in 0..grid.dim() {
        central_diff(grid, f, axis, &mut out[axis * n..(axis + 1) * n]);
    }
}

/// Per-node `D_pH`, `Γ q`, `D^3H[q, q]` on component-major slices.
struct HamiltonianField<'a> {
    h: &'a HamiltonianSpec,
    dim: usize,
    n: usize,
}

impl HamiltonianField<'_> {
    fn node(&self, field: &[f64], i: usize, out: &mut [f64]) {
        for a in 0..self.dim {
            out[a] = field[a * self.n + i];
        }
    }

    fn drift(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grad.len()];
        let (mut p, mut v) = (vec![0.0; self.dim], vec![0.0; self.dim]);
        for i in 0..self.n {
            self.node(grad, i, &mut p);
            self.h.grad_p(&[], &p, &mut v);
            for a in 0..self.dim {
                out[a * self.n + i] = v[a];
            }
        }
        out
    }

    /// `weight_i Γ(p_i) q_i`.
    fn hess_apply(&self, grad: &[f64], q: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grad.len()];
        let (mut p, mut qq, mut v) = (vec![0.0; self.dim], vec![0.0; self.dim], vec![0.0; self.dim]);
        for i in 0..self.n {
            self.node(grad, i, &mut p);
            self.node(q, i, &mut qq);
            self.h.hess_p_apply(&p, &qq, &mut v);
            for a in 0..self.dim {
                out[a * self.n + i] = weight[i] * v[a];
            }
        }
        out
    }

    /// `Γ(p_i) q_i · q_i`.
    fn hess_quadratic(&self, grad: &[f64], q: &[f64]) -> Vec<f64> {
        let ones = vec![1.0; self.n];
        let gq = self.hess_apply(grad, q, &ones);
        (0..self.n)
            .map(|i| (0..self.dim).map(|a| gq[a * self.n + i] * q[a * self.n + i]).sum())
            .collect()
    }

    /// `weight_i D^3H(p_i)[q_i, q_i]`.
    fn third(&self, grad: &[f64], q: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grad.len()];
        let (mut p, mut qq, mut v) = (vec![0.0; self.dim], vec![0.0; self.dim], vec![0.0; self.dim]);
        for i in 0..self.n {
            self.node(grad, i, &mut p);
            self.node(q, i, &mut qq);
            self.h.third_contract(&p, &qq, &mut v);
            for a in 0..self.dim {
                out[a * self.n + i] = weight[i] * v[a];
            }
        }
        out
    }
}

/// Extra right-hand sides, used by manufactured-solution tests.
#[derive(Debug, Clone, Default)]
pub struct ExtraSources<'a> {
    /// Added to `F` in the HJB step at slice `n`.
    pub hjb: Option<&'a ScalarField>,
    /// Added inside the density step from slice `n` to `n + 1`.
    pub fp: Option<&'a ScalarField>,
}

impl MfgSystem {
    pub fn new(hamiltonian: HamiltonianSpec, coupling: LocalCoupling, grid: TorusGrid, horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(Error::param("horizon and step count must be positive"));
        }
        Ok(Self {
            hamiltonian,
            coupling,
            grid,
            horizon,
            steps,
            options: MfgOptions::default(),
        })
    }

    pub fn with_options(mut self, options: MfgOptions) -> Self {
        self.options = options;
        self
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time grid on `[t0, T]` with (up to rounding) the base step.
    pub fn time_grid(&self, t0: f64) -> Result<TimeGrid> {
        if !(t0 >= 0.0 && t0 < self.horizon) {
            return Err(Error::OutOfRange {
                t: t0,
                t0: 0.0,
                horizon: self.horizon,
            });
        }
        let steps = ((self.horizon - t0) / self.dt() - 1e-9).ceil().max(1.0) as usize;
        TimeGrid::new(t0, self.horizon, steps)
    }

    pub fn operator(&self, kind: CouplingKind) -> Result<CouplingOperator> {
        CouplingOperator::new(self.coupling, self.grid, kind)
    }

    fn ham(&self) -> HamiltonianField<'_> {
        HamiltonianField {
            h: &self.hamiltonian,
            dim: self.grid.dim(),
            n: self.grid.node_count(),
        }
    }

    /// Backward HJB sweep for a frozen density path. Returns `u` slices and
    /// the gradients `D ū^n`.
    fn hjb(&self, stepper: &Stepper, op: &CouplingOperator, m: &[Vec<f64>], extra: Option<&ScalarField>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let grid = &self.grid;
        let n = grid.node_count();
        let d = grid.dim();
        let k_steps = m.len() - 1;
        let dt = stepper.dt();
        let potential = grid.sample(|x| self.hamiltonian.potential_at(x));
        let mut u = vec![Vec::new(); k_steps + 1];
        let mut grads = vec![Vec::new(); k_steps];
        u[k_steps] = self.coupling.terminal_field(grid);
        let mut p = vec![0.0; d];
        for step in (0..k_steps).rev() {
            let mut ubar = u[step + 1].clone();
            stepper.heat().solve(&mut ubar);
            let mut g = vec![0.0; d * n];
            gradient_into(grid, &ubar, &mut g);
            let f = op.apply(&m[step]);
            for i in 0..n {
                for a in 0..d {
                    p[a] = g[a * n + i];
                }
                let h = self.hamiltonian.kinetic(&p) + potential[i];
                let mut rhs = f[i];
                if let Some(e) = extra {
                    rhs += e.slice(step)[i];
                }
                ubar[i] += dt * (rhs - h);
            }
            u[step] = ubar;
            grads[step] = g;
        }
        (u, grads)
    }

    /// Forward density sweep for frozen gradients.
    fn fokker_planck(&self, stepper: &Stepper, m0: &[f64], grads: &[Vec<f64>], extra: Option<&ScalarField>) -> Result<Vec<Vec<f64>>> {
        let vol = self.grid.cell_volume();
        let dt = stepper.dt();
        let ham = self.ham();
        let mut out = Vec::with_capacity(grads.len() + 1);
        let mut m = m0.to_vec();
        out.push(m.clone());
        for (step, g) in grads.iter().enumerate() {
            let v = ham.drift(g);
            let mut before: f64 = m.iter().sum::<f64>() * vol;
            stepper.density_step(&mut m, Some(&v), None);
            if let Some(e) = extra {
                let mut s = e.slice(step).to_vec();
                stepper.heat().solve(&mut s);
                for (a, b) in m.iter_mut().zip(&s) {
                    *a += dt * b;
                }
                before += dt * s.iter().sum::<f64>() * vol;
            }
            let after: f64 = m.iter().sum::<f64>() * vol;
            if !((after - before).abs() <= MASS_DRIFT_LIMIT) {
                return Err(Error::Conservativity {
                    step: step + 1,
                    drift: (after - before).abs(),
                });
            }
            if extra.is_none() {
                clamp_and_renormalize(&mut m, vol, step + 1);
            }
            out.push(m.clone());
        }
        Ok(out)
    }

    /// Damped Picard iteration on the density path.
    pub fn solve(&self, t0: f64, m0: &DensityField, kind: CouplingKind) -> Result<MfgSolution> {
        self.solve_with(t0, m0, kind, None, ExtraSources::default())
    }

    /// [`solve`](Self::solve) with an initial Picard guess and extra sources.
    pub fn solve_with(
        &self,
        t0: f64,
        m0: &DensityField,
        kind: CouplingKind,
        initial_guess: Option<&ScalarField>,
        extra: ExtraSources<'_>,
    ) -> Result<MfgSolution> {
        self.grid.check_same(m0.grid())?;
        let opts = &self.options;
        if !(opts.tol > 0.0) || !(opts.damping > 0.0 && opts.damping <= 1.0) {
            return Err(Error::param("tolerance must be positive and damping in (0, 1]"));
        }
        if kind == CouplingKind::Local && m0.values().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidDensity("the local coupling needs a strictly positive initial density".into()));
        }
        let time = self.time_grid(t0)?;
        let k_steps = time.steps();
        let stepper = Stepper::new(self.grid, time.dt(), Advection::Centered);
        // D_pH is bounded by the Hamiltonian's Lipschitz constant per axis
        let speed = self.hamiltonian.lipschitz_bound() * self.grid.dim() as f64;
        Advection::Centered.check_cfl(&self.grid, time.dt(), speed)?;
        let op = self.operator(kind)?;
        let mut m: Vec<Vec<f64>> = match initial_guess {
            Some(g) => {
                if g.time_nodes() != k_steps + 1 {
                    return Err(Error::shape("initial guess has the wrong number of slices"));
                }
                (0..=k_steps).map(|k| g.slice(k).to_vec()).collect()
            }
            None => vec![m0.values().to_vec(); k_steps + 1],
        };
        m[0] = m0.values().to_vec();
        let lambda = opts.damping;
        let mut history = Vec::new();
        for iter in 1..=opts.max_iters {
            let (u, grads) = self.hjb(&stepper, &op, &m, extra.hjb);
            let next = self.fokker_planck(&stepper, m0.values(), &grads, extra.fp)?;
            let residual = next
                .iter()
                .zip(&m)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0f64, f64::max);
            if !residual.is_finite() {
                return Err(Error::Divergence {
                    iterations: iter,
                    residual,
                    history,
                });
            }
            history.push(residual);
            if residual < opts.tol {
                log::debug!("mfg {kind:?}: converged in {iter} iterations, residual {residual:.3e}");
                let flat_u: Vec<f64> = u.concat();
                let flat_m: Vec<f64> = next.concat();
                return Ok(MfgSolution {
                    u: ScalarField::space_time(self.grid, time, flat_u)?,
                    m: ScalarField::space_time(self.grid, time, flat_m)?,
                    kind,
                    iterations: iter,
                    fixed_point_residual: residual,
                    residual_history: history,
                    gradients: grads,
                });
            }
            for (a, b) in m.iter_mut().zip(&next).skip(1) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x = (1.0 - lambda) * *x + lambda * y;
                }
            }
        }
        Err(Error::Divergence {
            iterations: opts.max_iters,
            residual: history.last().copied().unwrap_or(f64::NAN),
            history,
        })
    }

    /// Solves both couplings on the same discretization and compares them.
    pub fn stability_gap(&self, t0: f64, m0: &DensityField, epsilon: f64) -> Result<StabilityReport> {
        let local = self.solve(t0, m0, CouplingKind::Local)?;
        let moll = self.solve(t0, m0, CouplingKind::Mollified(epsilon))?;
        let time = *local.time();
        let grid = self.grid;
        let n = grid.node_count();
        let d = grid.dim();
        let vol = grid.cell_volume();
        let dt = time.dt();
        let op_local = self.operator(CouplingKind::Local)?;
        let op_moll = self.operator(CouplingKind::Mollified(epsilon))?;
        let mut sup_u = 0.0f64;
        let mut grad_gap = 0.0f64;
        let mut m_gap2 = 0.0;
        let mut pairing = 0.0;
        let mut g = vec![0.0; d * n];
        for k in 0..=time.steps() {
            let du: Vec<f64> = moll.u.slice(k).iter().zip(local.u.slice(k)).map(|(a, b)| a - b).collect();
            sup_u = sup_u.max(du.iter().fold(0.0, |a, v| a.max(v.abs())));
            gradient_into(&grid, &du, &mut g);
            grad_gap = grad_gap.max((g.iter().map(|v| v * v).sum::<f64>() * vol).sqrt());
            let dm: Vec<f64> = moll.m.slice(k).iter().zip(local.m.slice(k)).map(|(a, b)| a - b).collect();
            // trapezoid weights in time
            let w = if k == 0 || k == time.steps() { 0.5 * dt } else { dt };
            m_gap2 += w * dm.iter().map(|v| v * v).sum::<f64>() * vol;
            if k < time.steps() {
                let fe = op_moll.apply(moll.m.slice(k));
                let fl = op_local.apply(local.m.slice(k));
                let df: Vec<f64> = fe.iter().zip(&fl).map(|(a, b)| a - b).collect();
                pairing += dt * inner(&grid, &df, &dm);
            }
        }
        Ok(StabilityReport {
            epsilon,
            sup_u_gap: sup_u,
            grad_gap_l2: grad_gap,
            m_gap_l2: m_gap2.sqrt(),
            duality_pairing: pairing,
            iterations_local: local.iterations,
            iterations_mollified: moll.iterations,
        })
    }

    /// Picard iteration for the linear forward-backward system around
    /// `base`: backward source `δF(μ) + b`, forward flux
    /// `m Γ D w̄ + c`, initial `μ0`, terminal `w = 0`.
    fn solve_linear(
        &self,
        base: &MfgSolution,
        mu0: &[f64],
        source: Option<&[Vec<f64>]>,
        flux: Option<&[Vec<f64>]>,
        order: LinearOrder,
    ) -> Result<LinearizedSolution> {
        let time = *base.time();
        let k_steps = time.steps();
        let grid = self.grid;
        let n = grid.node_count();
        let d = grid.dim();
        let stepper = Stepper::new(grid, time.dt(), Advection::Centered);
        let op = self.operator(base.kind)?;
        let ham = self.ham();
        let dt = time.dt();
        let drifts: Vec<Vec<f64>> = base.gradients.iter().map(|g| ham.drift(g)).collect();
        let masses: Vec<&[f64]> = (0..=k_steps).map(|k| base.m.slice(k)).collect();

        let backward = |mu: &[Vec<f64>]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let mut w = vec![vec![0.0; n]; k_steps + 1];
            let mut grads = vec![Vec::new(); k_steps];
            for step in (0..k_steps).rev() {
                let mut bar = w[step + 1].clone();
                stepper.heat().solve(&mut bar);
                let mut g = vec![0.0; d * n];
                gradient_into(&grid, &bar, &mut g);
                let mut next = bar.clone();
                stepper.add_advection(&drifts[step], &bar, -dt, &mut next);
                let df = op.derivative(masses[step], &mu[step]);
                for i in 0..n {
                    next[i] += dt * df[i];
                    if let Some(b) = source {
                        next[i] += dt * b[step][i];
                    }
                }
                w[step] = next;
                grads[step] = g;
            }
            (w, grads)
        };
        let forward = |grads: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mut out = Vec::with_capacity(k_steps + 1);
            let mut mu = mu0.to_vec();
            out.push(mu.clone());
            for step in 0..k_steps {
                let mut c = ham.hess_apply(&base.gradients[step], &grads[step], masses[step]);
                if let Some(extra) = flux {
                    for (x, y) in c.iter_mut().zip(&extra[step]) {
                        *x += y;
                    }
                }
                stepper.density_step(&mut mu, Some(&drifts[step]), Some(&c));
                out.push(mu.clone());
            }
            out
        };

        let mut lambda = self.options.damping;
        let tol = self.options.linear_tol;
        for _attempt in 0..5 {
            // start from the path transported without feedback
            let zero_grads = vec![vec![0.0; d * n]; k_steps];
            let mut mu = forward(&zero_grads);
            let mut first_residual = None;
            let mut diverged = false;
            for iter in 1..=self.options.max_iters {
                let (w, grads) = backward(&mu);
                let next = forward(&grads);
                let scale = next
                    .iter()
                    .flat_map(|s| s.iter())
                    .fold(0.0f64, |a, v| a.max(v.abs()));
                let diff = next
                    .iter()
                    .zip(&mu)
                    .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                    .fold(0.0f64, f64::max);
                let rel = if scale > 0.0 { diff / scale } else { 0.0 };
                if !rel.is_finite() {
                    diverged = true;
                    break;
                }
                let r0 = *first_residual.get_or_insert(rel.max(1e-300));
                if rel < tol || diff == 0.0 {
                    let (w, grads) = if diff == 0.0 { (w, grads) } else { backward(&next) };
                    return Ok(LinearizedSolution {
                        z: ScalarField::space_time(grid, time, w.concat())?,
                        rho: ScalarField::space_time(grid, time, next.concat())?,
                        order,
                        iterations: iter,
                        damping: lambda,
                        gradients: grads,
                    });
                }
                if rel > 1e3 * r0 {
                    diverged = true;
                    break;
                }
                for (a, b) in mu.iter_mut().zip(&next).skip(1) {
                    for (x, y) in a.iter_mut().zip(b) {
                        *x = (1.0 - lambda) * *x + lambda * y;
                    }
                }
            }
            if !diverged {
                break;
            }
            lambda *= 0.5;
            log::warn!("linearized Picard diverged, retrying with damping {lambda}");
        }
        Err(Error::Divergence {
            iterations: self.options.max_iters,
            residual: f64::NAN,
            history: Vec::new(),
        })
    }

    /// First-order linearization in the direction `rho0`.
    pub fn linearize_first(&self, base: &MfgSolution, rho0: &ScalarField) -> Result<LinearizedSolution> {
        self.grid.check_same(rho0.grid())?;
        if !rho0.is_spatial() {
            return Err(Error::shape("initial perturbation must be a spatial field"));
        }
        self.solve_linear(base, rho0.values(), None, None, LinearOrder::First)
    }

    /// Second-order linearization driven by a first-order solution.
    pub fn linearize_second(&self, base: &MfgSolution, first: &LinearizedSolution) -> Result<LinearizedSolution> {
        if first.order != LinearOrder::First {
            return Err(Error::param("second-order solve needs a first-order input"));
        }
        let time = *base.time();
        let k_steps = time.steps();
        if first.z.time_nodes() != k_steps + 1 {
            return Err(Error::shape("first-order solution does not match the base"));
        }
        let n = self.grid.node_count();
        let op = self.operator(base.kind)?;
        let ham = self.ham();
        let mut source = Vec::with_capacity(k_steps);
        let mut flux = Vec::with_capacity(k_steps);
        for step in 0..k_steps {
            let p = &base.gradients[step];
            let q = first.gradient(step);
            let rho = first.rho.slice(step);
            let quad = ham.hess_quadratic(p, q);
            let d2f = op.second_derivative(base.m.slice(step), rho);
            source.push(d2f.iter().zip(&quad).map(|(a, b)| a - b).collect::<Vec<f64>>());
            let mut c = ham.third(p, q, base.m.slice(step));
            let two_rho: Vec<f64> = rho.iter().map(|r| 2.0 * r).collect();
            let g = ham.hess_apply(p, q, &two_rho);
            for (x, y) in c.iter_mut().zip(&g) {
                *x += y;
            }
            flux.push(c);
        }
        self.solve_linear(base, &vec![0.0; n], Some(&source), Some(&flux), LinearOrder::Second)
    }

    /// `<z(t0), ρ(t0)> - Σ dt <m Γ Dz̄, Dz̄> - Σ dt <δF(ρ), ρ>`; zero up to
    /// solver tolerance for the discrete system.
    pub fn energy_identity_probe(&self, base: &MfgSolution, first: &LinearizedSolution) -> Result<f64> {
        let time = *base.time();
        let grid = self.grid;
        let op = self.operator(base.kind)?;
        let ham = self.ham();
        let dt = time.dt();
        let mut dissipation = 0.0;
        let mut monotone = 0.0;
        for step in 0..time.steps() {
            let q = first.gradient(step);
            let gq = ham.hess_apply(&base.gradients[step], q, base.m.slice(step));
            dissipation += dt * grid.cell_volume() * gq.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
            let rho = first.rho.slice(step);
            monotone += dt * inner(&grid, &op.derivative(base.m.slice(step), rho), rho);
        }
        let start = inner(&grid, first.z.slice(0), first.rho.slice(0));
        Ok(start - dissipation - monotone)
    }

    /// `||U(t0, ·, m1) - U(t0, ·, m2)||_∞ / W1(m1, m2)` for each pair.
    pub fn lipschitz_probe(&self, t0: f64, kind: CouplingKind, pairs: &[(DensityField, DensityField)]) -> Result<Vec<f64>> {
        if self.grid.dim() != 1 {
            return Err(Error::UnsupportedDimension {
                dim: self.grid.dim(),
                hint: "the Lipschitz probe uses the exact one-dimensional W1".into(),
            });
        }
        pairs
            .iter()
            .map(|(a, b)| {
                let ua = self.solve(t0, a, kind)?;
                let ub = self.solve(t0, b, kind)?;
                let gap = ua
                    .u
                    .slice(0)
                    .iter()
                    .zip(ub.u.slice(0))
                    .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
                Ok(gap / w1_circle(a, b)?)
            })
            .collect()
    }
}

/// Free-function form of [`MfgSystem::solve`].
pub fn solve_mfg(system: &MfgSystem, t0: f64, m0: &DensityField, kind: CouplingKind) -> Result<MfgSolution> {
    system.solve(t0, m0, kind)
}

pub fn stability_gap(system: &MfgSystem, t0: f64, m0: &DensityField, epsilon: f64) -> Result<StabilityReport> {
    system.stability_gap(t0, m0, epsilon)
}

pub fn solve_linearized_first(system: &MfgSystem, base: &MfgSolution, rho0: &ScalarField) -> Result<LinearizedSolution> {
    system.linearize_first(base, rho0)
}

pub fn solve_linearized_second(system: &MfgSystem, base: &MfgSolution, first: &LinearizedSolution) -> Result<LinearizedSolution> {
    system.linearize_second(base, first)
}

pub fn energy_identity_probe(system: &MfgSystem, base: &MfgSolution, first: &LinearizedSolution) -> Result<f64> {
    system.energy_identity_probe(base, first)
}

/// `U(t0, ·, m0)` through the representation formula.
pub fn master_field(system: &MfgSystem, t0: f64, m0: &DensityField, kind: CouplingKind) -> Result<ScalarField> {
    Ok(system.solve(t0, m0, kind)?.value_at_start())
}

/// Density `m0 + s ρ`, checked for validity.
pub fn perturbed_density(m0: &DensityField, rho: &ScalarField, s: f64) -> Result<DensityField> {
    let v: Vec<f64> = m0.values().iter().zip(rho.values()).map(|(a, b)| a + s * b).collect();
    DensityField::new(ScalarField::spatial(*m0.grid(), v)?)
}

/// Mismatch between the linearized solutions and finite differences of
/// the nonlinear solver at `m0 ± s ρ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeCheck {
    pub steps: Vec<f64>,
    /// `||z(t0) - (U(m0 + sρ) - U(m0)) / s||_∞`.
    pub first: Vec<f64>,
    /// `||w(t0) - (U(m0 + sρ) - 2U(m0) + U(m0 - sρ)) / s^2||_∞`.
    pub second: Vec<f64>,
}

impl DerivativeCheck {
    /// Successive ratios `e(s_k) / e(s_{k+1})`.
    pub fn ratios(errors: &[f64]) -> Vec<f64> {
        errors.windows(2).map(|w| w[0] / w[1]).collect()
    }
}

pub fn derivative_check(system: &MfgSystem, t0: f64, m0: &DensityField, rho: &ScalarField, kind: CouplingKind, steps: &[f64]) -> Result<DerivativeCheck> {
    let base = system.solve(t0, m0, kind)?;
    let first = system.linearize_first(&base, rho)?;
    let second = system.linearize_second(&base, &first)?;
    let u0 = base.u.slice(0);
    let z = first.z.slice(0);
    let w = second.z.slice(0);
    let mut out = DerivativeCheck {
        steps: steps.to_vec(),
        first: Vec::with_capacity(steps.len()),
        second: Vec::with_capacity(steps.len()),
    };
    for &s in steps {
        let up = master_field(system, t0, &perturbed_density(m0, rho, s)?, kind)?;
        let down = master_field(system, t0, &perturbed_density(m0, rho, -s)?, kind)?;
        let mut e1 = 0.0f64;
        let mut e2 = 0.0f64;
        for i in 0..u0.len() {
            let (a, b) = (up.values()[i], down.values()[i]);
            e1 = e1.max(((a - u0[i]) / s - z[i]).abs());
            e2 = e2.max(((a - 2.0 * u0[i] + b) / (s * s) - w[i]).abs());
        }
        out.first.push(e1);
        out.second.push(e2);
    }
    Ok(out)
}

/// Central divergence helper re-exported for callers assembling fluxes.
pub fn divergence(grid: &TorusGrid, field: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.node_count()];
    central_div(grid, field, &mut out);
    out
}
