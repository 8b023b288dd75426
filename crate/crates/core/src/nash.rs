//! The N-player Nash system on the tensor grid `(T^1)^N`, the projections
//! of the master field onto empirical measures and the gap diagnostics
//! between the two.

use crate::coupling::{HamiltonianSpec, LocalCoupling, MollifiedCoupling};
use crate::error::{Error, Result};
use crate::grid::{central_diff, interpolate_slice, max_abs, ScalarField, TimeGrid, TorusGrid};
use crate::measures::{default_bandwidth, project_to_grid, DensityField, EmpiricalMeasure};
use crate::mfg::{CouplingKind, MfgOptions, MfgSystem};
use crate::pde::Advection;
use crate::spectral::HeatSolver;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

/// Memory allowed for one tensor solve.
pub const MEMORY_BUDGET_BYTES: u128 = 1 << 30;

/// Default number of sampled tensor points for the diagnostics.
pub const DEFAULT_SAMPLE_POINTS: usize = 64;

/// Largest `(N - 1) log2 M` for which averages use exact quadrature.
pub const EXACT_AVERAGE_LIMIT: f64 = 20.0;

/// Which time slices a solve keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Retain {
    /// Initial and terminal slices only.
    #[default]
    Ends,
    /// Every slice.
    All,
    /// Every `k`-th slice plus both ends.
    Every(usize),
}

impl Retain {
    fn keeps(self, k: usize, steps: usize) -> bool {
        k == 0
            || k == steps
            || match self {
                Retain::Ends => false,
                Retain::All => true,
                Retain::Every(s) => s > 0 && k.is_multiple_of(s),
            }
    }

    fn count(self, steps: usize) -> usize {
        (0..=steps).filter(|&k| self.keeps(k, steps)).count()
    }
}

/// Discretization of a Nash solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NashConfig {
    pub players: usize,
    pub points: usize,
    pub horizon: f64,
    pub steps: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub retain: Retain,
}

impl NashConfig {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Bytes for `N` value arrays, their diffused copies, the drifts, the
    /// coupling table and every retained slice.
    pub fn memory_estimate(&self) -> u128 {
        let nodes = (self.points as u128).saturating_pow(self.players as u32);
        let retained = self.retain.count(self.steps) as u128;
        nodes * self.players as u128 * 8 * (4 + retained)
    }

    fn check_budget(&self) -> Result<()> {
        let required = self.memory_estimate();
        if required <= MEMORY_BUDGET_BYTES {
            return Ok(());
        }
        let fits = |n: usize, m: usize| NashConfig { players: n, points: m, ..self.clone() }.memory_estimate() <= MEMORY_BUDGET_BYTES;
        let mut players = self.players;
        while players > 2 && !fits(players, self.points) {
            players -= 1;
        }
        let mut points = self.points;
        while points > TorusGrid::MIN_POINTS && !fits(self.players, points) {
            points /= 2;
        }
        Err(Error::MemoryBudget {
            required_bytes: required,
            suggested_players: players,
            suggested_points: points.max(TorusGrid::MIN_POINTS),
        })
    }
}

/// Values `v^{N,i}` on retained time slices of the tensor grid.
#[derive(Debug, Clone)]
pub struct NashSolution {
    config: NashConfig,
    tensor: TorusGrid,
    time: TimeGrid,
    /// `slices[k][i]` is player `i` at time index `k`.
    slices: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Largest `||v(t_k)|| / bound(t_k)` seen during the solve.
    pub max_principle_ratio: f64,
}

impl NashSolution {
    pub fn config(&self) -> &NashConfig {
        &self.config
    }

    pub fn players(&self) -> usize {
        self.config.players
    }

    /// The `N`-dimensional tensor grid.
    pub fn tensor_grid(&self) -> &TorusGrid {
        &self.tensor
    }

    /// The one-dimensional grid of each coordinate.
    pub fn axis_grid(&self) -> TorusGrid {
        TorusGrid::new(1, self.config.points).expect("valid axis grid")
    }

    pub fn time(&self) -> &TimeGrid {
        &self.time
    }

    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.slices.keys().copied()
    }

    pub fn slice(&self, player: usize, k: usize) -> Result<&[f64]> {
        let s = self
            .slices
            .get(&k)
            .ok_or_else(|| Error::param(format!("time slice {k} was not retained")))?;
        s.get(player)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::param(format!("player {player} out of range")))
    }

    /// Value at a tensor node given by per-player indices.
    pub fn value_at(&self, player: usize, k: usize, idx: &[usize]) -> Result<f64> {
        let flat = idx.iter().fold(0usize, |acc, &i| acc * self.config.points + i);
        Ok(self.slice(player, k)?[flat])
    }

    /// Multilinear interpolation at an off-grid tensor point.
    pub fn interpolate(&self, player: usize, k: usize, x: &[f64]) -> Result<f64> {
        Ok(interpolate_slice(&self.tensor, self.slice(player, k)?, x))
    }

    /// `D_{x_player} v^{player}` by central differences, interpolated.
    pub fn own_gradient(&self, player: usize, k: usize, x: &[f64]) -> Result<f64> {
        let h = self.tensor.spacing();
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[player] += h;
        xm[player] -= h;
        let s = self.slice(player, k)?;
        Ok((interpolate_slice(&self.tensor, s, &xp) - interpolate_slice(&self.tensor, s, &xm)) / (2.0 * h))
    }
}

/// Sorted node indices packed in base `M`; equal multisets give equal keys.
fn multiset_key(indices: &mut [usize], m: usize) -> u64 {
    indices.sort_unstable();
    indices.iter().fold(0u64, |acc, &i| acc * m as u64 + i as u64)
}

/// `F^ε(x_i, m^{N,i}_x)` at every tensor node for every player.
fn coupling_table(fc: &MollifiedCoupling, players: usize, tensor: &TorusGrid) -> Result<Vec<Vec<f64>>> {
    let m = tensor.points();
    let h = tensor.spacing();
    let mut table: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut out = vec![vec![0.0; tensor.node_count()]; players];
    let mut idx = vec![0usize; players];
    let mut others = Vec::with_capacity(players - 1);
    let mut under_resolved = false;
    for flat in 0..tensor.node_count() {
        tensor.unflatten(flat, &mut idx);
        for i in 0..players {
            others.clear();
            others.extend(idx.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v));
            let key = multiset_key(&mut others, m);
            let field = match table.get(&key) {
                Some(f) => f,
                None => {
                    let atoms: Vec<Vec<f64>> = others.iter().map(|&j| vec![j as f64 * h]).collect();
                    let eval = fc.eval_empirical_field(&EmpiricalMeasure::from_points(atoms)?);
                    under_resolved |= eval.under_resolved;
                    table.entry(key).or_insert(eval.values)
                }
            };
            out[i][flat] = field[idx[i]];
        }
    }
    if under_resolved {
        log::warn!("mollifier radius {} is at or below the grid spacing", fc.mollifier().epsilon());
    }
    Ok(out)
}

/// Backward IMEX solve of the Nash system: the tensor Laplacian implicit,
/// the own Hamiltonian and the cross transport explicit with central
/// differences.
pub fn solve_nash(hamiltonian: &HamiltonianSpec, coupling: &LocalCoupling, config: &NashConfig) -> Result<NashSolution> {
    let n_players = config.players;
    if n_players < 2 {
        return Err(Error::param("the Nash system needs at least two players"));
    }
    if !(config.horizon > 0.0) || config.steps == 0 {
        return Err(Error::param("horizon and step count must be positive"));
    }
    config.check_budget()?;
    let tensor = TorusGrid::new(n_players, config.points)?;
    let axis = TorusGrid::new(1, config.points)?;
    let time = TimeGrid::new(0.0, config.horizon, config.steps)?;
    let dt = time.dt();
    let speed = hamiltonian.lipschitz_bound() * n_players as f64;
    Advection::Centered.check_cfl(&tensor, dt, speed)?;

    let fc = MollifiedCoupling::with_epsilon(*coupling, axis, config.epsilon)?;
    let forcing = coupling_table(&fc, n_players, &tensor)?;
    let nodes = tensor.node_count();
    let m = config.points;
    let terminal: Vec<f64> = coupling.terminal_field(&axis);
    let potential: Vec<f64> = axis.sample(|x| hamiltonian.potential_at(x));
    let coord_index = |flat: usize, a: usize| (flat / tensor.stride(a)) % m;

    let mut v: Vec<Vec<f64>> = (0..n_players)
        .map(|i| (0..nodes).map(|flat| terminal[coord_index(flat, i)]).collect())
        .collect();
    let g_norm = max_abs(&terminal);
    let f_norm = forcing.iter().map(|f| max_abs(f)).fold(0.0, f64::max);
    let h0_norm = max_abs(&potential);

    let mut slices = BTreeMap::new();
    if config.retain.keeps(config.steps, config.steps) {
        slices.insert(config.steps, v.clone());
    }
    let heat = HeatSolver::new(tensor, dt);
    let mut drifts = vec![vec![0.0; nodes]; n_players];
    let mut diff = vec![0.0; nodes];
    let mut ratio = 0.0f64;
    for step in (0..config.steps).rev() {
        // diffuse all players, two per complex transform
        let mut chunks = v.chunks_mut(2);
        for pair in &mut chunks {
            match pair {
                [a, b] => heat.solve_pair(a, b),
                [a] => heat.solve(a),
                _ => unreachable!(),
            }
        }
        for j in 0..n_players {
            central_diff(&tensor, &v[j], j, &mut diff);
            for (d, &p) in drifts[j].iter_mut().zip(&diff) {
                let mut out = [0.0];
                hamiltonian.grad_p(&[], &[p], &mut out);
                *d = out[0];
            }
        }
        for i in 0..n_players {
            let mut next = v[i].clone();
            central_diff(&tensor, &v[i], i, &mut diff);
            for flat in 0..nodes {
                let h = hamiltonian.kinetic(&[diff[flat]]) + potential[coord_index(flat, i)];
                next[flat] += dt * (forcing[i][flat] - h);
            }
            for j in (0..n_players).filter(|&j| j != i) {
                central_diff(&tensor, &v[i], j, &mut diff);
                for flat in 0..nodes {
                    next[flat] -= dt * drifts[j][flat] * diff[flat];
                }
            }
            v[i] = next;
        }
        let bound = g_norm + (config.horizon - time.time(step)) * (f_norm + h0_norm) + 1e-8;
        let value = v.iter().map(|s| max_abs(s)).fold(0.0, f64::max);
        ratio = ratio.max(value / bound);
        if !(value <= bound) {
            return Err(Error::MaximumPrinciple {
                step: config.steps - step,
                value,
                bound,
            });
        }
        if config.retain.keeps(step, config.steps) {
            slices.insert(step, v.clone());
        }
    }
    Ok(NashSolution {
        config: config.clone(),
        tensor,
        time,
        slices,
        max_principle_ratio: ratio,
    })
}

/// `U^ε(t, x, m)` evaluated at projected empirical measures, with a cache
/// keyed by the time and the atom multiset.
#[derive(Debug)]
pub struct MasterEvaluator {
    system: MfgSystem,
    epsilon: f64,
    bandwidth: f64,
    cache: Mutex<HashMap<(u64, Vec<u64>), Arc<Vec<f64>>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl MasterEvaluator {
    /// `system` must live on a one-dimensional grid.
    pub fn new(system: MfgSystem, epsilon: f64, bandwidth: Option<f64>) -> Result<Self> {
        if system.grid.dim() != 1 {
            return Err(Error::UnsupportedDimension {
                dim: system.grid.dim(),
                hint: "projections are computed on the circle".into(),
            });
        }
        let bandwidth = bandwidth.unwrap_or_else(|| default_bandwidth(&system.grid, epsilon));
        Ok(Self {
            system,
            epsilon,
            bandwidth,
            cache: Mutex::new(HashMap::new()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    /// Evaluator matching a Nash discretization. Tensor states sit on
    /// nodes, so the projection uses bandwidth `h`: each atom becomes the
    /// discrete delta at its node and no smoothing bias enters.
    pub fn for_nash(hamiltonian: HamiltonianSpec, coupling: LocalCoupling, config: &NashConfig, options: MfgOptions) -> Result<Self> {
        let grid = TorusGrid::new(1, config.points)?;
        let system = MfgSystem::new(hamiltonian, coupling, grid, config.horizon, config.steps)?.with_options(options);
        Self::new(system, config.epsilon, Some(grid.spacing()))
    }

    pub fn system(&self) -> &MfgSystem {
        &self.system
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `(hits, misses)` of the field cache.
    pub fn cache_stats(&self) -> (usize, usize) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    /// `u^ε(t, ·)` from the projection of the given atoms.
    pub fn field(&self, t: f64, atoms: &[f64]) -> Result<Arc<Vec<f64>>> {
        let mut bits: Vec<u64> = atoms.iter().map(|a| a.rem_euclid(1.0).to_bits()).collect();
        bits.sort_unstable();
        let key = (t.to_bits(), bits);
        if let Some(f) = self.cache.lock().expect("cache lock").get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(f.clone());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        if t >= self.system.horizon - 1e-12 * self.system.horizon.max(1.0) {
            let field = Arc::new(self.system.coupling.terminal_field(&self.system.grid));
            self.cache.lock().expect("cache lock").insert(key, field.clone());
            return Ok(field);
        }
        let em = EmpiricalMeasure::from_points(atoms.iter().map(|&a| vec![a]).collect())?;
        let density = project_to_grid(&em, &self.system.grid, self.bandwidth)?;
        let sol = self.system.solve(t, &density, CouplingKind::Mollified(self.epsilon))?;
        let field = Arc::new(sol.u.slice(0).to_vec());
        self.cache.lock().expect("cache lock").insert(key, field.clone());
        Ok(field)
    }

    /// `u^{N,i}(t, x) = U^ε(t, x_i, m^{N,i}_x)`.
    pub fn project(&self, player: usize, t: f64, x: &[f64]) -> Result<f64> {
        if player >= x.len() || x.len() < 2 {
            return Err(Error::param("player index outside the tensor point"));
        }
        let others: Vec<f64> = x.iter().enumerate().filter(|(j, _)| *j != player).map(|(_, &v)| v).collect();
        let field = self.field(t, &others)?;
        Ok(interpolate_slice(&self.system.grid, &field, &[x[player]]))
    }
}

/// Free-function form of [`MasterEvaluator::project`].
pub fn project_master(evaluator: &MasterEvaluator, player: usize, t: f64, x: &[f64]) -> Result<f64> {
    evaluator.project(player, t, x)
}

/// Error terms of the projected system at sampled points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashDiagnostics {
    pub players: usize,
    /// `sup_i |D_{x_i} u^{N,i}|`.
    pub alpha: f64,
    /// `sup_{j != i} |D_{x_j} u^{N,i}|`.
    pub beta: f64,
    /// `sup |residual|` of the projected equation.
    pub residual: f64,
    /// `1 + α^2 + (N β)^2`.
    pub theta: f64,
    /// Set when the finite-difference step is at the solver noise floor.
    pub noise_warning: bool,
    pub samples: usize,
}

/// A sampled tensor node with its time index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SamplePoint {
    pub step: usize,
    pub index: Vec<usize>,
}

/// Latin-hypercube tensor indices with time indices in `0..max_step`.
pub fn stratified_points(players: usize, points: usize, max_step: usize, count: usize, seed: u64) -> Vec<SamplePoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut axes: Vec<Vec<usize>> = Vec::with_capacity(players);
    for _ in 0..players {
        let mut strata: Vec<usize> = (0..count)
            .map(|p| (((p as f64 + rng.random::<f64>()) / count as f64) * points as f64) as usize % points)
            .collect();
        for k in (1..strata.len()).rev() {
            let j = rng.random_range(0..=k);
            strata.swap(k, j);
        }
        axes.push(strata);
    }
    (0..count)
        .map(|p| SamplePoint {
            step: if max_step == 0 { 0 } else { rng.random_range(0..max_step) },
            index: axes.iter().map(|a| a[p]).collect(),
        })
        .collect()
}

pub(crate) fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Residual of the projected values in the Nash equations.
///
/// Time derivatives are forward differences on the time lattice; `x_i`
/// derivatives come from the cached field; `x_j` derivatives move the atom
/// by `±δ` with `δ` one grid cell and re-solve.
pub fn residual_probe(evaluator: &MasterEvaluator, players: usize, points: &[SamplePoint], workers: usize) -> Result<NashDiagnostics> {
    let sys = evaluator.system();
    let grid = sys.grid;
    let h = grid.spacing();
    let delta = h;
    let dt = sys.dt();
    let ham = sys.hamiltonian;
    let fc = MollifiedCoupling::with_epsilon(sys.coupling, grid, evaluator.epsilon())?;
    let noise_warning = sys.options.tol / (delta * delta) > 1e-3;
    if noise_warning {
        log::warn!("finite-difference step {delta} is at the projection noise floor");
    }
    if points.iter().any(|p| p.index.len() != players || p.step >= sys.steps) {
        return Err(Error::param("sample points must be tensor nodes with a later time slice"));
    }
    let per_point = |p: &SamplePoint| -> Result<(f64, f64, f64)> {
        let t = p.step as f64 * dt;
        let t_next = (p.step + 1) as f64 * dt;
        let x: Vec<f64> = p.index.iter().map(|&i| i as f64 * h).collect();
        let value = |i: usize, t: f64, x: &[f64]| evaluator.project(i, t, x);
        let shifted = |a: usize, s: f64| {
            let mut y = x.clone();
            y[a] += s;
            y
        };
        // own derivatives of every player, for the cross-transport drift
        let mut own = vec![0.0; players];
        for (j, o) in own.iter_mut().enumerate() {
            *o = (value(j, t, &shifted(j, delta))? - value(j, t, &shifted(j, -delta))?) / (2.0 * delta);
        }
        let (mut alpha, mut beta, mut res) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..players {
            let u0 = value(i, t, &x)?;
            let dt_u = (value(i, t_next, &x)? - u0) / dt;
            let mut lap = 0.0;
            let mut cross = 0.0;
            for j in 0..players {
                let up = value(i, t, &shifted(j, delta))?;
                let down = value(i, t, &shifted(j, -delta))?;
                lap += (up - 2.0 * u0 + down) / (delta * delta);
                if j != i {
                    let d = (up - down) / (2.0 * delta);
                    beta = beta.max(d.abs());
                    let mut v = [0.0];
                    ham.grad_p(&[], &[own[j]], &mut v);
                    cross += v[0] * d;
                }
            }
            alpha = alpha.max(own[i].abs());
            let others: Vec<Vec<f64>> = x.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| vec![v]).collect();
            let (f, _) = fc.eval_empirical(&EmpiricalMeasure::from_points(others)?, &[x[i]])?;
            let lhs = -dt_u - lap + ham.value(&[x[i]], &[own[i]]) + cross;
            res = res.max((lhs - f).abs());
        }
        Ok((alpha, beta, res))
    };
    let results = parallel_map(points, workers, per_point);
    let (mut alpha, mut beta, mut residual) = (0.0f64, 0.0f64, 0.0f64);
    for r in results {
        let (a, b, c) = r?;
        alpha = alpha.max(a);
        beta = beta.max(b);
        residual = residual.max(c);
    }
    let n = players as f64;
    Ok(NashDiagnostics {
        players,
        alpha,
        beta,
        residual,
        theta: 1.0 + alpha * alpha + (n * beta) * (n * beta),
        noise_warning,
        samples: points.len(),
    })
}

/// `w^{N,i}(t_k, ·)`: player `i`'s value averaged over the other players
/// drawn from `m0`.
#[derive(Debug, Clone)]
pub struct AverageValue {
    pub values: ScalarField,
    /// Standard error per node; zero for exact quadrature.
    pub stderr: Vec<f64>,
    pub exact: bool,
}

/// Exact node quadrature when the tensor is small, otherwise Monte Carlo
/// over nodes drawn with probability `h m0_j` (an unbiased estimate of the
/// same quadrature).
pub fn average_value(v: &NashSolution, player: usize, k: usize, m0: &DensityField, mc_samples: usize, seed: u64) -> Result<AverageValue> {
    let n = v.players();
    let m = v.config().points;
    if (n - 1) as f64 * (m as f64).log2() <= EXACT_AVERAGE_LIMIT {
        average_value_exact(v, player, k, m0)
    } else {
        average_value_mc(v, player, k, m0, mc_samples, seed)
    }
}

pub fn average_value_exact(v: &NashSolution, player: usize, k: usize, m0: &DensityField) -> Result<AverageValue> {
    let axis = v.axis_grid();
    axis.check_same(m0.grid())?;
    let slice = v.slice(player, k)?;
    let tensor = v.tensor_grid();
    let n = v.players();
    let h = axis.spacing();
    let weights: Vec<f64> = m0.values().iter().map(|x| x * h).collect();
    let mut out = vec![0.0; axis.node_count()];
    let mut idx = vec![0usize; n];
    for (flat, val) in slice.iter().enumerate() {
        tensor.unflatten(flat, &mut idx);
        let w: f64 = (0..n).filter(|&j| j != player).map(|j| weights[idx[j]]).product();
        out[idx[player]] += w * val;
    }
    Ok(AverageValue {
        values: ScalarField::spatial(axis, out)?,
        stderr: vec![0.0; axis.node_count()],
        exact: true,
    })
}

pub fn average_value_mc(v: &NashSolution, player: usize, k: usize, m0: &DensityField, samples: usize, seed: u64) -> Result<AverageValue> {
    if samples == 0 {
        return Err(Error::param("Monte Carlo average needs at least one sample"));
    }
    let axis = v.axis_grid();
    axis.check_same(m0.grid())?;
    let slice = v.slice(player, k)?;
    let n = v.players();
    let m = axis.points();
    let h = axis.spacing();
    let mut cdf = Vec::with_capacity(m);
    let mut acc = 0.0;
    for x in m0.values() {
        acc += x * h;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // running mean and centered second moment per node
    let mut mean = vec![0.0; m];
    let mut m2 = vec![0.0; m];
    let mut idx = vec![0usize; n];
    for s in 0..samples {
        for (j, slot) in idx.iter_mut().enumerate() {
            if j != player {
                let u: f64 = rng.random::<f64>() * acc;
                *slot = cdf.partition_point(|&c| c <= u).min(m - 1);
            }
        }
        for xi in 0..m {
            idx[player] = xi;
            let flat = idx.iter().fold(0usize, |a, &i| a * m + i);
            let val = slice[flat];
            let d = val - mean[xi];
            mean[xi] += d / (s + 1) as f64;
            m2[xi] += d * (val - mean[xi]);
        }
    }
    let ns = samples as f64;
    let stderr = m2
        .iter()
        .map(|q| if samples < 2 { f64::INFINITY } else { (q / (ns - 1.0) / ns).sqrt() })
        .collect();
    Ok(AverageValue {
        values: ScalarField::spatial(axis, mean)?,
        stderr,
        exact: false,
    })
}

/// Gaps between the Nash values, the projected master field and the
/// local MFG value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NashGap {
    pub players: usize,
    pub epsilon: f64,
    /// `max |v^{N,i} - u^{N,i}|` over sampled nodes at the initial time.
    pub sup_gap: f64,
    /// Spread of the sampled maximum between the two halves of the sample.
    pub sup_gap_noise: f64,
    /// `||w^{N,1}(t0) - u(t0)||_∞` against the local MFG.
    pub avg_gap: f64,
    pub avg_gap_stderr: f64,
}

/// Computes both gaps at the initial time.
pub fn nash_gap(
    solution: &NashSolution,
    evaluator: &MasterEvaluator,
    local: &MfgSystem,
    m0: &DensityField,
    points: &[Vec<usize>],
    workers: usize,
) -> Result<NashGap> {
    let n = solution.players();
    let h = solution.tensor_grid().spacing();
    let per_point = |idx: &Vec<usize>| -> Result<f64> {
        let x: Vec<f64> = idx.iter().map(|&i| i as f64 * h).collect();
        let mut gap = 0.0f64;
        for i in 0..n {
            let v = solution.value_at(i, 0, idx)?;
            let u = evaluator.project(i, 0.0, &x)?;
            gap = gap.max((v - u).abs());
        }
        Ok(gap)
    };
    let gaps: Vec<f64> = parallel_map(points, workers, per_point).into_iter().collect::<Result<_>>()?;
    let half = gaps.len() / 2;
    let max_of = |s: &[f64]| s.iter().cloned().fold(0.0f64, f64::max);
    let sup_gap = max_of(&gaps);
    let noise = if half > 0 { (max_of(&gaps[..half]) - max_of(&gaps[half..])).abs() } else { 0.0 };
    let avg = average_value(solution, 0, 0, m0, 10_000, 0x5eed)?;
    let u = local.solve(0.0, m0, CouplingKind::Local)?;
    let mut avg_gap = 0.0f64;
    let mut se = 0.0f64;
    for (i, (a, b)) in avg.values.values().iter().zip(u.u.slice(0)).enumerate() {
        let g = (a - b).abs();
        if g > avg_gap {
            avg_gap = g;
            se = avg.stderr[i];
        }
    }
    Ok(NashGap {
        players: n,
        epsilon: evaluator.epsilon(),
        sup_gap,
        sup_gap_noise: noise,
        avg_gap,
        avg_gap_stderr: se,
    })
}

/// `ε_N = (ln N)^{-β}`.
pub fn epsilon_schedule(players: usize, beta: f64) -> Result<f64> {
    if players < 2 {
        return Err(Error::Domain("the schedule needs N >= 2".into()));
    }
    Ok((players as f64).ln().powf(-beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{default_problem, Profile};
    use std::f64::consts::PI;

    fn config(players: usize, points: usize) -> NashConfig {
        NashConfig {
            players,
            points,
            horizon: 0.5,
            steps: 16,
            epsilon: 0.2,
            retain: Retain::All,
        }
    }

    #[test]
    fn decoupled_values_vanish() {
        let (h, f) = default_problem(Profile::Decoupled);
        let sol = solve_nash(&h, &f, &config(3, 16)).unwrap();
        for k in sol.retained().collect::<Vec<_>>() {
            for i in 0..3 {
                assert!(max_abs(sol.slice(i, k).unwrap()) < 1e-8);
            }
        }
    }

    #[test]
    fn terminal_condition_is_exact() {
        let (h, f) = default_problem(Profile::Default);
        let sol = solve_nash(&h, &f, &config(2, 16)).unwrap();
        let tensor = *sol.tensor_grid();
        for i in 0..2 {
            let s = sol.slice(i, 16).unwrap();
            for flat in 0..tensor.node_count() {
                assert_eq!(s[flat], f.terminal_at(&[tensor.coord(flat, i)]));
            }
        }
        assert!(sol.max_principle_ratio <= 1.0);
    }

    #[test]
    fn symmetries_hold_for_three_players() {
        let (h, f) = default_problem(Profile::Default);
        let sol = solve_nash(&h, &f, &config(3, 16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let idx: Vec<usize> = (0..3).map(|_| rng.random_range(0..16)).collect();
            let k = rng.random_range(0..=16);
            // exchange the two other players of player 0
            let swapped = vec![idx[0], idx[2], idx[1]];
            let a = sol.value_at(0, k, &idx).unwrap();
            assert!((a - sol.value_at(0, k, &swapped).unwrap()).abs() < 1e-8);
            // relabel players 0 and 1
            let relabeled = vec![idx[1], idx[0], idx[2]];
            assert!((a - sol.value_at(1, k, &relabeled).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn memory_budget_refusal_suggests_a_smaller_problem() {
        let (h, f) = default_problem(Profile::Default);
        let cfg = NashConfig { players: 4, points: 64, ..config(4, 64) };
        match solve_nash(&h, &f, &cfg) {
            Err(Error::MemoryBudget { suggested_players, suggested_points, .. }) => {
                assert!(suggested_players < 4);
                assert!(suggested_points < 64);
            }
            other => panic!("{other:?}"),
        }
        assert!(config(3, 64).memory_estimate() <= MEMORY_BUDGET_BYTES);
        assert!(NashConfig { retain: Retain::Ends, ..config(4, 32) }.memory_estimate() <= MEMORY_BUDGET_BYTES);
    }

    #[test]
    fn multiset_keys_ignore_order() {
        assert_eq!(multiset_key(&mut [3, 1, 2], 8), multiset_key(&mut [2, 3, 1], 8));
        assert_ne!(multiset_key(&mut [1, 1, 2], 8), multiset_key(&mut [1, 2, 2], 8));
    }

    #[test]
    fn projection_is_permutation_invariant_and_cached() {
        let (h, f) = default_problem(Profile::Default);
        let ev = MasterEvaluator::for_nash(h, f, &config(4, 16), MfgOptions::default()).unwrap();
        let a = ev.project(0, 0.0, &[0.25, 0.5, 0.125, 0.75]).unwrap();
        let b = ev.project(0, 0.0, &[0.25, 0.75, 0.5, 0.125]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ev.cache_stats(), (1, 1));
    }

    #[test]
    fn two_player_projection_is_the_bump_value_function() {
        let (h, f) = default_problem(Profile::Default);
        let cfg = config(2, 16);
        let ev = MasterEvaluator::for_nash(h, f, &cfg, MfgOptions::default()).unwrap();
        let grid = TorusGrid::new(1, 16).unwrap();
        let b = 0.375;
        let density = project_to_grid(&EmpiricalMeasure::from_points(vec![vec![b]]).unwrap(), &grid, ev.bandwidth()).unwrap();
        let u = ev.system().solve(0.0, &density, CouplingKind::Mollified(0.2)).unwrap();
        for i in 0..16 {
            let a = i as f64 / 16.0;
            assert_eq!(ev.project(0, 0.0, &[a, b]).unwrap(), u.u.slice(0)[i]);
        }
    }

    #[test]
    fn averages_agree_between_quadrature_and_monte_carlo() {
        let (h, f) = default_problem(Profile::Default);
        let sol = solve_nash(&h, &f, &config(3, 16)).unwrap();
        let m0 = DensityField::from_fn(sol.axis_grid(), |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()).unwrap();
        let exact = average_value_exact(&sol, 0, 0, &m0).unwrap();
        let mc = average_value_mc(&sol, 0, 0, &m0, 10_000, 4).unwrap();
        for i in 0..16 {
            let d = (exact.values.values()[i] - mc.values.values()[i]).abs();
            assert!(d <= 3.0 * mc.stderr[i] + 1e-12, "{i}: {d} vs {}", mc.stderr[i]);
        }
    }

    #[test]
    fn average_of_independent_values_is_the_slice() {
        let (_, f) = default_problem(Profile::Decoupled);
        let h = HamiltonianSpec::new(0.3);
        let f = LocalCoupling { terminal: 0.5, ..f };
        let sol = solve_nash(&h, &f, &config(2, 16)).unwrap();
        let m0 = DensityField::from_fn(sol.axis_grid(), |x| 1.0 + 0.5 * (2.0 * PI * x[0]).sin()).unwrap();
        let avg = average_value_mc(&sol, 0, 0, &m0, 50, 1).unwrap();
        for i in 0..16 {
            let v = sol.value_at(0, 0, &[i, 3]).unwrap();
            assert!((avg.values.values()[i] - v).abs() < 1e-12);
            assert!(avg.stderr[i] < 1e-12);
        }
    }

    #[test]
    fn decoupled_residual_has_no_cross_dependence() {
        let (_, f) = default_problem(Profile::Decoupled);
        let h = HamiltonianSpec::new(0.3);
        let f = LocalCoupling { terminal: 0.5, ..f };
        let cfg = config(2, 16);
        let ev = MasterEvaluator::for_nash(h, f, &cfg, MfgOptions::default()).unwrap();
        let pts = stratified_points(2, 16, 16, 8, 3);
        let d = residual_probe(&ev, 2, &pts, 2).unwrap();
        assert_eq!(d.beta, 0.0);
        assert!(d.alpha > 0.0);
        // only the time and space truncation remains
        let fine = NashConfig { steps: 64, points: 32, ..cfg.clone() };
        let ev2 = MasterEvaluator::for_nash(h, f, &fine, MfgOptions::default()).unwrap();
        let pts2 = stratified_points(2, 32, 64, 8, 3);
        let d2 = residual_probe(&ev2, 2, &pts2, 2).unwrap();
        assert_eq!(d2.beta, 0.0);
        assert!(d2.residual < 0.5 * d.residual, "{d:?} {d2:?}");
        assert!((d.theta - (1.0 + d.alpha * d.alpha)).abs() < 1e-15);
    }

    #[test]
    fn schedule_matches_definition() {
        assert!((epsilon_schedule(3, 0.1).unwrap() - 3f64.ln().powf(-0.1)).abs() < 1e-15);
        assert!(epsilon_schedule(1, 0.1).is_err());
    }
}
