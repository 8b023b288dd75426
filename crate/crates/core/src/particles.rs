//! Euler–Maruyama simulation of the particle systems driven by Nash,
//! projected master and MFG feedbacks under one shared noise, and the
//! propagation-of-chaos metrics built on them.

use crate::coupling::HamiltonianSpec;
use crate::error::{Error, Result};
use crate::grid::{geodesic_distance, interpolate_slice, min_image, ScalarField, TimeGrid, TorusGrid};
use crate::measures::{sample_with, w1_circle, DensityField, EmpiricalMeasure};
use crate::mfg::MfgSolution;
use crate::nash::{MasterEvaluator, NashSolution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Which feedback a drift implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftKind {
    Nash,
    ProjectedMaster,
    MfgMollified,
    MfgLocal,
    Synthetic,
}

/// Feedback `b(i, t_k, state)`; the state is the `N x d` row-major vector
/// of all players.
pub trait Drift: Sync {
    fn kind(&self) -> DriftKind;

    fn dim(&self) -> usize;

    fn eval(&self, player: usize, step: usize, t: f64, state: &[f64], out: &mut [f64]) -> Result<()>;
}

/// The same vector for every player and time.
#[derive(Debug, Clone)]
pub struct ConstantDrift(pub Vec<f64>);

impl Drift for ConstantDrift {
    fn kind(&self) -> DriftKind {
        DriftKind::Synthetic
    }

    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, _: usize, _: usize, _: f64, _: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.0);
        Ok(())
    }
}

/// A drift given by a closure of `(player, t, state, out)`.
pub struct FnDrift<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> Drift for FnDrift<F>
where
    F: Fn(usize, f64, &[f64], &mut [f64]) + Sync,
{
    fn kind(&self) -> DriftKind {
        DriftKind::Synthetic
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, player: usize, _: usize, t: f64, state: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(player, t, state, out);
        Ok(())
    }
}

/// `-D_p H(x_i, D u(t_k, x_i))` for an MFG solution; ignores the other
/// players.
pub struct MfgDrift<'a> {
    hamiltonian: HamiltonianSpec,
    solution: &'a MfgSolution,
    kind: DriftKind,
}

impl<'a> MfgDrift<'a> {
    pub fn new(hamiltonian: HamiltonianSpec, solution: &'a MfgSolution) -> Self {
        let kind = match solution.kind {
            crate::mfg::CouplingKind::Local => DriftKind::MfgLocal,
            crate::mfg::CouplingKind::Mollified(_) => DriftKind::MfgMollified,
        };
        Self { hamiltonian, solution, kind }
    }

    /// Lipschitz constant in `x` of the drift, from the largest second
    /// difference of the driving gradients (`|D^2_pp H| <= 1`).
    pub fn lipschitz(&self) -> f64 {
        let grid = self.solution.grid();
        let d = grid.dim();
        let n = grid.node_count();
        let h = grid.spacing();
        let mut lip = 0.0f64;
        for k in 0..self.solution.time().steps() {
            let g = self.solution.gradient(k);
            for a in 0..d {
                let comp = &g[a * n..(a + 1) * n];
                for b in 0..d {
                    for flat in 0..n {
                        let next = grid.shift(flat, b, 1);
                        lip = lip.max((comp[next] - comp[flat]).abs() / h);
                    }
                }
            }
        }
        lip * d as f64
    }
}

impl Drift for MfgDrift<'_> {
    fn kind(&self) -> DriftKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.solution.grid().dim()
    }

    fn eval(&self, player: usize, step: usize, _t: f64, state: &[f64], out: &mut [f64]) -> Result<()> {
        let grid = self.solution.grid();
        let d = grid.dim();
        let steps = self.solution.time().steps();
        if step >= steps {
            return Err(Error::param(format!("drift requested at step {step} of {steps}")));
        }
        let x = &state[player * d..(player + 1) * d];
        let g = self.solution.gradient(step);
        let n = grid.node_count();
        let p: Vec<f64> = (0..d).map(|a| interpolate_slice(grid, &g[a * n..(a + 1) * n], x)).collect();
        self.hamiltonian.grad_p(x, &p, out);
        out.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    }
}

/// `-D_p H(x_i, D_{x_i} v^{N,i}(t_k, x))` from a Nash solve that kept
/// every slice.
pub struct NashDrift<'a> {
    hamiltonian: HamiltonianSpec,
    solution: &'a NashSolution,
}

impl<'a> NashDrift<'a> {
    pub fn new(hamiltonian: HamiltonianSpec, solution: &'a NashSolution) -> Result<Self> {
        let steps = solution.time().steps();
        if solution.retained().count() != steps + 1 {
            return Err(Error::param("the Nash feedback needs every time slice retained"));
        }
        Ok(Self { hamiltonian, solution })
    }
}

impl Drift for NashDrift<'_> {
    fn kind(&self) -> DriftKind {
        DriftKind::Nash
    }

    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, player: usize, step: usize, _t: f64, state: &[f64], out: &mut [f64]) -> Result<()> {
        if state.len() != self.solution.players() {
            return Err(Error::shape("state size differs from the Nash player count"));
        }
        let p = self.solution.own_gradient(player, step, state)?;
        self.hamiltonian.grad_p(&[], &[p], out);
        out[0] = -out[0];
        Ok(())
    }
}

/// `-D_p H(x_i, D_{x_i} u^{N,i}(t_k, x))` with the state snapped to the
/// nearest grid node, so repeated visits reuse cached master fields.
pub struct ProjectedMasterDrift<'a> {
    evaluator: &'a MasterEvaluator,
}

impl<'a> ProjectedMasterDrift<'a> {
    pub fn new(evaluator: &'a MasterEvaluator) -> Self {
        Self { evaluator }
    }
}

impl Drift for ProjectedMasterDrift<'_> {
    fn kind(&self) -> DriftKind {
        DriftKind::ProjectedMaster
    }

    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, player: usize, _step: usize, t: f64, state: &[f64], out: &mut [f64]) -> Result<()> {
        let grid = self.evaluator.system().grid;
        let m = grid.points();
        let h = grid.spacing();
        let snapped: Vec<f64> = state.iter().map(|&x| ((x / h).round() as usize % m) as f64 * h).collect();
        let others: Vec<f64> = snapped.iter().enumerate().filter(|(j, _)| *j != player).map(|(_, &v)| v).collect();
        let field = self.evaluator.field(t, &others)?;
        let i = (snapped[player] / h).round() as usize % m;
        let p = (field[(i + 1) % m] - field[(i + m - 1) % m]) / (2.0 * h);
        self.evaluator.system().hamiltonian.grad_p(&[], &[p], out);
        out[0] = -out[0];
        Ok(())
    }
}

/// Root seeds of a simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub noise: u64,
    pub initial: u64,
}

/// Paths of `K` replicas of `N` players.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub replicas: usize,
    pub players: usize,
    pub dim: usize,
    pub time: TimeGrid,
    pub seeds: Seeds,
    pub kind: DriftKind,
    /// Wrapped positions, `[replica][player][time node][axis]` flattened.
    paths: Vec<f64>,
    /// Endpoint displacement on the universal cover, `[replica][player][axis]`.
    displacement: Vec<f64>,
}

impl TrajectoryEnsemble {
    fn offset(&self, r: usize, i: usize, k: usize) -> usize {
        ((r * self.players + i) * self.time.nodes() + k) * self.dim
    }

    /// Position of player `i` in replica `r` at time node `k`.
    pub fn position(&self, r: usize, i: usize, k: usize) -> &[f64] {
        let o = self.offset(r, i, k);
        &self.paths[o..o + self.dim]
    }

    /// All players of replica `r` at time node `k`, row-major.
    pub fn state(&self, r: usize, k: usize) -> Vec<f64> {
        (0..self.players).flat_map(|i| self.position(r, i, k).to_vec()).collect()
    }

    /// Lifted endpoint displacement of player `i` in replica `r`.
    pub fn displacement(&self, r: usize, i: usize) -> &[f64] {
        let o = (r * self.players + i) * self.dim;
        &self.displacement[o..o + self.dim]
    }

    pub fn paths(&self) -> &[f64] {
        &self.paths
    }

    /// Endpoint empirical measure of replica `r` at time node `k`.
    pub fn empirical(&self, r: usize, k: usize) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_points((0..self.players).map(|i| self.position(r, i, k).to_vec()).collect())
    }

    /// Raw little-endian dump of the wrapped paths.
    pub fn write_binary(&self, path: &std::path::Path) -> Result<()> {
        let bytes: Vec<u8> = self.paths.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Simulation size and parallelism.
#[derive(Debug, Clone, Copy)]
pub struct SimulationSize {
    pub players: usize,
    pub replicas: usize,
    pub workers: usize,
}

fn stream_rng(root: u64, replica: usize, player: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(((replica as u64) << 32) | player as u64);
    rng
}

/// Initial positions of one replica: each player draws from `m0` on its
/// own stream, so every drift compared under the same seeds starts from
/// the same points.
pub fn initial_positions(m0: &DensityField, players: usize, replica: usize, seed: u64) -> Vec<f64> {
    (0..players)
        .flat_map(|i| {
            let mut rng = stream_rng(seed, replica, i);
            sample_with(m0, 1, &mut rng).remove(0)
        })
        .collect()
}

/// Reduction to `[0, 1)`; `rem_euclid` can round up to exactly 1.
fn wrap(x: f64) -> f64 {
    let y = x.rem_euclid(1.0);
    if y >= 1.0 {
        0.0
    } else {
        y
    }
}

/// Euler–Maruyama with diffusion `sqrt(2)` and periodic wrapping.
pub fn simulate(drift: &dyn Drift, m0: &DensityField, size: SimulationSize, time: &TimeGrid, seeds: Seeds) -> Result<TrajectoryEnsemble> {
    let SimulationSize { players, replicas, workers } = size;
    if players == 0 || replicas == 0 {
        return Err(Error::param("need at least one player and one replica"));
    }
    let d = m0.grid().dim();
    if drift.dim() != d {
        return Err(Error::shape("drift and initial law have different dimensions"));
    }
    let nodes = time.nodes();
    let dt = time.dt();
    let sigma = (2.0 * dt).sqrt();
    let run = |r: usize| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut x = initial_positions(m0, players, r, seeds.initial);
        let mut rngs: Vec<ChaCha8Rng> = (0..players).map(|i| stream_rng(seeds.noise, r, i)).collect();
        let mut path = vec![0.0; players * nodes * d];
        let mut lift = vec![0.0; players * d];
        let mut b = vec![0.0; players * d];
        let record = |path: &mut [f64], x: &[f64], k: usize| {
            for i in 0..players {
                let o = (i * nodes + k) * d;
                path[o..o + d].copy_from_slice(&x[i * d..(i + 1) * d]);
            }
        };
        record(&mut path, &x, 0);
        for k in 0..time.steps() {
            let t = time.time(k);
            for i in 0..players {
                drift
                    .eval(i, k, t, &x, &mut b[i * d..(i + 1) * d])
                    .map_err(|e| Error::Drift {
                        replica: r,
                        player: i,
                        step: k,
                        reason: e.to_string(),
                    })?;
                if b[i * d..(i + 1) * d].iter().any(|v| !v.is_finite()) {
                    return Err(Error::Drift {
                        replica: r,
                        player: i,
                        step: k,
                        reason: "non-finite drift".into(),
                    });
                }
            }
            for i in 0..players {
                for a in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rngs[i]);
                    let step = dt * b[i * d + a] + sigma * z;
                    lift[i * d + a] += step;
                    x[i * d + a] = wrap(x[i * d + a] + step);
                }
            }
            record(&mut path, &x, k + 1);
        }
        Ok((path, lift))
    };
    let ids: Vec<usize> = (0..replicas).collect();
    let results = crate::nash::parallel_map(&ids, workers, |&r| run(r));
    let mut paths = Vec::with_capacity(replicas * players * nodes * d);
    let mut displacement = Vec::with_capacity(replicas * players * d);
    for res in results {
        let (p, l) = res?;
        paths.extend(p);
        displacement.extend(l);
    }
    Ok(TrajectoryEnsemble {
        replicas,
        players,
        dim: d,
        time: *time,
        seeds,
        kind: drift.kind(),
        paths,
        displacement,
    })
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `E[sup_t |e1_i(t) - e2_i(t)|]` over players and replicas, with the
/// standard error across replicas.
pub fn coupled_gap(e1: &TrajectoryEnsemble, e2: &TrajectoryEnsemble) -> Result<(f64, f64)> {
    if e1.seeds != e2.seeds {
        return Err(Error::Coupling("ensembles were simulated under different seeds".into()));
    }
    if e1.players != e2.players || e1.replicas != e2.replicas || e1.dim != e2.dim || e1.time != e2.time {
        return Err(Error::Coupling("ensembles differ in size or time grid".into()));
    }
    let per_replica: Vec<f64> = (0..e1.replicas)
        .map(|r| {
            (0..e1.players)
                .map(|i| {
                    (0..e1.time.nodes())
                        .map(|k| geodesic_distance(e1.position(r, i, k), e2.position(r, i, k)))
                        .fold(0.0f64, f64::max)
                })
                .sum::<f64>()
                / e1.players as f64
        })
        .collect();
    Ok(mean_stderr(&per_replica))
}

/// `sup |b1 - b2|` over every state visited by the ensemble.
pub fn feedback_difference(e: &TrajectoryEnsemble, b1: &dyn Drift, b2: &dyn Drift) -> Result<f64> {
    let d = e.dim;
    let mut o1 = vec![0.0; d];
    let mut o2 = vec![0.0; d];
    let mut eta = 0.0f64;
    for r in 0..e.replicas {
        for k in 0..e.time.steps() {
            let state = e.state(r, k);
            let t = e.time.time(k);
            for i in 0..e.players {
                b1.eval(i, k, t, &state, &mut o1)?;
                b2.eval(i, k, t, &state, &mut o2)?;
                let diff = o1.iter().zip(&o2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                eta = eta.max(diff);
            }
        }
    }
    Ok(eta)
}

/// `η T e^{L T}`: the bound on the pathwise gap between two systems whose
/// feedbacks differ by at most `η` when one of them is `L`-Lipschitz.
pub fn gronwall_envelope(eta: f64, lipschitz: f64, duration: f64) -> f64 {
    eta * duration * (lipschitz * duration).exp()
}

/// Propagation-of-chaos summary of an ensemble against a reference flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosReport {
    pub players: usize,
    pub replicas: usize,
    pub endpoint_w1: f64,
    pub endpoint_w1_stderr: f64,
    /// Mean correlation of lifted endpoint displacements between distinct
    /// players.
    pub correlation: f64,
    pub correlation_stderr: f64,
    /// Mean `W1` to the reference at every time node.
    pub w1_curve: Vec<f64>,
}

/// `reference` is a space-time density on the circle with the same time
/// nodes as the ensemble.
pub fn chaos_metrics(e: &TrajectoryEnsemble, reference: &ScalarField) -> Result<ChaosReport> {
    if e.dim != 1 {
        return Err(Error::UnsupportedDimension {
            dim: e.dim,
            hint: "exact W1 is available on the circle only".into(),
        });
    }
    if reference.time_nodes() != e.time.nodes() {
        return Err(Error::shape("reference flow and ensemble have different time nodes"));
    }
    let grid: TorusGrid = *reference.grid();
    let densities: Vec<DensityField> = (0..e.time.nodes())
        .map(|k| DensityField::normalized(reference.slice_field(k)))
        .collect::<Result<_>>()?;
    let mut w1_curve = vec![0.0; e.time.nodes()];
    let mut endpoint = Vec::with_capacity(e.replicas);
    for r in 0..e.replicas {
        for (k, dens) in densities.iter().enumerate() {
            let em = e.empirical(r, k)?;
            let w = w1_circle(&em, dens)?;
            w1_curve[k] += w / e.replicas as f64;
            if k == e.time.steps() {
                endpoint.push(w);
            }
        }
    }
    debug_assert_eq!(grid.dim(), 1);
    let (endpoint_w1, endpoint_w1_stderr) = mean_stderr(&endpoint);
    let (correlation, correlation_stderr) = endpoint_correlation(e);
    Ok(ChaosReport {
        players: e.players,
        replicas: e.replicas,
        endpoint_w1,
        endpoint_w1_stderr,
        correlation,
        correlation_stderr,
        w1_curve,
    })
}

/// Mean over replicas of the average product of standardized
/// displacements over distinct player pairs; its standard error comes
/// from the spread of the per-replica values.
pub fn endpoint_correlation(e: &TrajectoryEnsemble) -> (f64, f64) {
    let n = e.players;
    if n < 2 || e.replicas < 2 {
        return (0.0, f64::INFINITY);
    }
    let k = e.replicas as f64;
    let mut mean = vec![0.0; n];
    let mut sd = vec![0.0; n];
    for i in 0..n {
        mean[i] = (0..e.replicas).map(|r| e.displacement(r, i)[0]).sum::<f64>() / k;
        sd[i] = ((0..e.replicas).map(|r| (e.displacement(r, i)[0] - mean[i]).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let per_replica: Vec<f64> = (0..e.replicas)
        .map(|r| {
            let z: Vec<f64> = (0..n).map(|i| (e.displacement(r, i)[0] - mean[i]) / sd[i]).collect();
            let mut acc = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    acc += z[i] * z[j];
                }
            }
            acc / pairs
        })
        .collect();
    mean_stderr(&per_replica)
}

/// Mean and standard error of `W1` between `n` iid draws from `m` and `m`.
pub fn empirical_w1_rate(m: &DensityField, n: usize, seeds: usize, root: u64) -> Result<(f64, f64)> {
    let values: Vec<f64> = (0..seeds)
        .map(|s| {
            let mut rng = stream_rng(root, s, 0);
            let pts = sample_with(m, n, &mut rng);
            w1_circle(&EmpiricalMeasure::from_points(pts)?, m)
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&values))
}

/// Lifted mean endpoint displacement over all players and replicas.
pub fn mean_displacement(e: &TrajectoryEnsemble) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::with_capacity(e.dim);
    let mut se = Vec::with_capacity(e.dim);
    for a in 0..e.dim {
        let v: Vec<f64> = (0..e.replicas).flat_map(|r| (0..e.players).map(move |i| (r, i))).map(|(r, i)| e.displacement(r, i)[a]).collect();
        let (m, s) = mean_stderr(&v);
        mean.push(m);
        se.push(s);
    }
    (mean, se)
}

/// Per-step increment minus drift, lifted, for noise diagnostics.
pub fn increments(e: &TrajectoryEnsemble) -> Vec<f64> {
    let mut out = Vec::with_capacity(e.replicas * e.players * e.time.steps() * e.dim);
    for r in 0..e.replicas {
        for i in 0..e.players {
            for k in 0..e.time.steps() {
                let a = e.position(r, i, k);
                let b = e.position(r, i, k + 1);
                out.extend(a.iter().zip(b).map(|(x, y)| min_image(y - x)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{default_problem, Profile};
    use crate::mfg::{CouplingKind, MfgSystem};
    use std::f64::consts::PI;

    fn uniform() -> DensityField {
        DensityField::uniform(TorusGrid::new(1, 64).unwrap())
    }

    fn size(players: usize, replicas: usize) -> SimulationSize {
        SimulationSize { players, replicas, workers: 4 }
    }

    const SEEDS: Seeds = Seeds { noise: 11, initial: 12 };

    #[test]
    fn zero_drift_increments_have_the_brownian_variance() {
        let time = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let e = simulate(&ConstantDrift(vec![0.0]), &uniform(), size(4, 200), &time, SEEDS).unwrap();
        let inc = increments(&e);
        let n = inc.len() as f64;
        let var = inc.iter().map(|v| v * v).sum::<f64>() / n;
        // the fourth moment of a centered normal is 3σ^4
        let sd = (2.0 * (2.0 * time.dt()).powi(2) / n).sqrt();
        assert!((var - 2.0 * time.dt()).abs() < 3.0 * sd, "{var}");
    }

    #[test]
    fn identical_runs_are_bit_identical_regardless_of_workers() {
        let time = TimeGrid::new(0.0, 0.25, 10).unwrap();
        let d = FnDrift { dim: 1, f: |_: usize, t: f64, s: &[f64], o: &mut [f64]| o[0] = (2.0 * PI * s.iter().sum::<f64>()).sin() + t };
        let a = simulate(&d, &uniform(), size(3, 9), &time, SEEDS).unwrap();
        let b = simulate(&d, &uniform(), SimulationSize { workers: 1, ..size(3, 9) }, &time, SEEDS).unwrap();
        assert_eq!(a, b);
        assert_eq!(coupled_gap(&a, &b).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_drift_moves_the_mean() {
        let time = TimeGrid::new(0.0, 0.5, 20).unwrap();
        let e = simulate(&ConstantDrift(vec![0.7]), &uniform(), size(5, 400), &time, SEEDS).unwrap();
        let (mean, se) = mean_displacement(&e);
        assert!((mean[0] - 0.35).abs() < 3.0 * se[0], "{mean:?} {se:?}");
    }

    #[test]
    fn constant_drift_difference_bounds_the_gap() {
        let time = TimeGrid::new(0.0, 0.5, 20).unwrap();
        let a = simulate(&ConstantDrift(vec![0.1]), &uniform(), size(3, 20), &time, SEEDS).unwrap();
        let b = simulate(&ConstantDrift(vec![0.14]), &uniform(), size(3, 20), &time, SEEDS).unwrap();
        let (gap, _) = coupled_gap(&a, &b).unwrap();
        assert!(gap <= 0.04 * 0.5 + 1e-12);
        assert!(gap >= 0.04 * 0.5 - 1e-9);
    }

    #[test]
    fn seed_mismatch_is_rejected() {
        let time = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let a = simulate(&ConstantDrift(vec![0.0]), &uniform(), size(2, 2), &time, SEEDS).unwrap();
        let b = simulate(&ConstantDrift(vec![0.0]), &uniform(), size(2, 2), &time, Seeds { noise: 1, ..SEEDS }).unwrap();
        assert!(matches!(coupled_gap(&a, &b), Err(Error::Coupling(_))));
    }

    #[test]
    fn lipschitz_perturbation_stays_inside_the_envelope() {
        let time = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let lip = 2.0 * PI * 0.3;
        let base = FnDrift { dim: 1, f: move |i: usize, _: f64, s: &[f64], o: &mut [f64]| o[0] = 0.3 * (2.0 * PI * s[i]).sin() };
        let eta = 0.05;
        let pert = FnDrift { dim: 1, f: move |i: usize, _: f64, s: &[f64], o: &mut [f64]| o[0] = 0.3 * (2.0 * PI * s[i]).sin() + eta * (2.0 * PI * s[i]).cos() };
        let a = simulate(&base, &uniform(), size(3, 50), &time, SEEDS).unwrap();
        let b = simulate(&pert, &uniform(), size(3, 50), &time, SEEDS).unwrap();
        let (gap, se) = coupled_gap(&a, &b).unwrap();
        assert!(gap > 0.0);
        assert!(gap <= gronwall_envelope(eta, lip, 0.5) + 3.0 * se);
        assert!((feedback_difference(&a, &base, &pert).unwrap() - eta).abs() < 1e-3);
    }

    #[test]
    fn gap_shrinks_linearly_with_the_perturbation() {
        let time = TimeGrid::new(0.0, 0.5, 25).unwrap();
        let base = FnDrift { dim: 1, f: |i: usize, _: f64, s: &[f64], o: &mut [f64]| o[0] = 0.3 * (2.0 * PI * s[i]).sin() };
        let a = simulate(&base, &uniform(), size(2, 30), &time, SEEDS).unwrap();
        let gap_for = |eta: f64| {
            let pert = FnDrift { dim: 1, f: move |i: usize, _: f64, s: &[f64], o: &mut [f64]| o[0] = 0.3 * (2.0 * PI * s[i]).sin() + eta };
            coupled_gap(&a, &simulate(&pert, &uniform(), size(2, 30), &time, SEEDS).unwrap()).unwrap().0
        };
        let (g1, g2) = (gap_for(0.02), gap_for(0.01));
        assert!((g1 / g2 - 2.0).abs() < 0.1, "{g1} {g2}");
    }

    #[test]
    fn independent_players_are_uncorrelated() {
        let time = TimeGrid::new(0.0, 0.5, 10).unwrap();
        let d = FnDrift { dim: 1, f: |i: usize, _: f64, s: &[f64], o: &mut [f64]| o[0] = 0.5 * (2.0 * PI * s[i]).sin() };
        let e = simulate(&d, &uniform(), size(4, 500), &time, SEEDS).unwrap();
        let (c, se) = endpoint_correlation(&e);
        assert!(c.abs() < 3.0 * se, "{c} {se}");
    }

    #[test]
    fn permuting_players_permutes_paths() {
        // relabeling the players together with their streams is the same as
        // running the symmetric system and reading it in another order
        let time = TimeGrid::new(0.0, 0.25, 8).unwrap();
        let d = FnDrift {
            dim: 1,
            f: |i: usize, _: f64, s: &[f64], o: &mut [f64]| {
                let mean: f64 = s.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| (2.0 * PI * x).sin()).sum();
                o[0] = 0.2 * mean;
            },
        };
        let e = simulate(&d, &uniform(), size(3, 3), &time, SEEDS).unwrap();
        // replay replica 0 with players 0 and 2 swapped in state and noise
        let mut x = initial_positions(&uniform(), 3, 0, SEEDS.initial);
        x.swap(0, 2);
        let mut rngs: Vec<ChaCha8Rng> = [2, 1, 0].iter().map(|&i| stream_rng(SEEDS.noise, 0, i)).collect();
        let sigma = (2.0 * time.dt()).sqrt();
        for k in 0..8 {
            let mut b = [0.0; 3];
            for i in 0..3 {
                d.eval(i, k, time.time(k), &x, &mut b[i..i + 1]).unwrap();
            }
            for i in 0..3 {
                let z: f64 = StandardNormal.sample(&mut rngs[i]);
                x[i] = wrap(x[i] + (time.dt() * b[i] + sigma * z));
            }
            for (i, &src) in [2, 1, 0].iter().enumerate() {
                assert_eq!(x[i].to_bits(), e.position(0, src, k + 1)[0].to_bits());
            }
        }
    }

    #[test]
    fn mfg_drift_follows_the_density_flow() {
        let (h, f) = default_problem(Profile::Default);
        let grid = TorusGrid::new(1, 32).unwrap();
        let sys = MfgSystem::new(h, f, grid, 0.5, 16).unwrap();
        let m0 = DensityField::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos()).unwrap();
        let sol = sys.solve(0.0, &m0, CouplingKind::Local).unwrap();
        let drift = MfgDrift::new(h, &sol);
        let e = simulate(&drift, &m0, size(200, 20), sol.time(), SEEDS).unwrap();
        let rep = chaos_metrics(&e, &sol.m).unwrap();
        // N = 200 iid draws sit within a few N^{-1/2} of the flow
        assert!(rep.endpoint_w1 < 0.05, "{rep:?}");
        assert!(drift.lipschitz() > 0.0);
    }

    #[test]
    fn drift_failures_carry_context() {
        let time = TimeGrid::new(0.0, 0.5, 4).unwrap();
        let d = FnDrift { dim: 1, f: |i: usize, t: f64, _: &[f64], o: &mut [f64]| o[0] = if i == 1 && t > 0.2 { f64::NAN } else { 0.0 } };
        match simulate(&d, &uniform(), size(2, 1), &time, SEEDS) {
            Err(Error::Drift { player: 1, step: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
