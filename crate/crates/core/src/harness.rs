//! Experiment configuration, sweeps, rate fitting and run artifacts.

use crate::coupling::{closeness_probe, monotonicity_probe, regularity_probe, MollifiedCoupling, ProblemFile, Profile};
use crate::error::{Error, Result};
use crate::grid::{ScalarField, TimeGrid, TorusGrid};
use crate::measures::{random_smooth_density, DensityField};
use crate::mfg::{derivative_check, CouplingKind, DerivativeCheck, MfgOptions, MfgSystem};
use crate::nash::{epsilon_schedule, nash_gap, parallel_map, residual_probe, solve_nash, stratified_points, MasterEvaluator, NashConfig, Retain};
use crate::particles::{chaos_metrics, coupled_gap, feedback_difference, gronwall_envelope, simulate, MfgDrift, NashDrift, Seeds, SimulationSize};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Least-squares fit of `log y = slope log x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_rate(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::shape("rate fit needs paired samples"));
    }
    if xs.len() < 3 {
        return Err(Error::param("rate fit needs at least three points"));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain("rate fit needs positive finite samples".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("rate fit needs distinct abscissae".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(RateFit { slope, intercept, r2 })
}

/// Space-time discretization shared by every cell of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub points: usize,
    pub steps: usize,
    pub horizon: f64,
}

/// Initial law `m0` on the circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialLaw {
    Uniform,
    /// `1 + amplitude cos 2πx`.
    Cosine { amplitude: f64 },
}

impl Default for InitialLaw {
    fn default() -> Self {
        InitialLaw::Cosine { amplitude: 0.5 }
    }
}

impl InitialLaw {
    pub fn density(&self, grid: TorusGrid) -> Result<DensityField> {
        match *self {
            InitialLaw::Uniform => Ok(DensityField::uniform(grid)),
            InitialLaw::Cosine { amplitude } => DensityField::from_fn(grid, |x| 1.0 + amplitude * (2.0 * PI * x[0]).cos()),
        }
    }
}

/// How `ε` is chosen per player count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EpsilonChoice {
    Fixed { value: f64 },
    /// `ε_N = (ln N)^{-β}`.
    Schedule { beta: f64 },
}

impl EpsilonChoice {
    pub fn for_players(&self, players: usize) -> Result<f64> {
        match *self {
            EpsilonChoice::Fixed { value } => Ok(value),
            EpsilonChoice::Schedule { beta } => epsilon_schedule(players, beta),
        }
    }
}

fn default_sample_points() -> usize {
    crate::nash::DEFAULT_SAMPLE_POINTS
}

fn default_mc_samples() -> usize {
    10_000
}

fn default_direction() -> f64 {
    0.7
}

/// The sweep a run executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Sweep {
    EpsilonStability {
        epsilons: Vec<f64>,
    },
    NashGap {
        players: Vec<usize>,
        epsilon: EpsilonChoice,
        #[serde(default = "default_sample_points")]
        sample_points: usize,
        #[serde(default = "default_mc_samples")]
        mc_samples: usize,
    },
    Chaos {
        players: Vec<usize>,
        epsilon: f64,
        replicas: usize,
    },
    DerivativeCheck {
        epsilon: f64,
        steps: Vec<f64>,
        /// Amplitude `a` of the perturbation direction `a sin 2πx`.
        #[serde(default = "default_direction")]
        direction: f64,
    },
    AssumptionProbes {
        epsilons: Vec<f64>,
        radius: f64,
        alpha: f64,
        samples: usize,
        pairs: usize,
    },
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::EpsilonStability { .. } => "epsilon-stability",
            Sweep::NashGap { .. } => "nash-gap",
            Sweep::Chaos { .. } => "chaos",
            Sweep::DerivativeCheck { .. } => "derivative-check",
            Sweep::AssumptionProbes { .. } => "assumption-probes",
        }
    }
}

/// A metric bound that decides the run's exit status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Check {
    pub metric: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub metric: String,
    pub value: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub passed: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub problem: ProblemFile,
    /// Problem file that replaces `problem` when set.
    #[serde(default)]
    pub problem_file: Option<PathBuf>,
    pub grid: GridSpec,
    #[serde(default)]
    pub initial: InitialLaw,
    pub sweep: Sweep,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub solver: MfgOptions,
    #[serde(default)]
    pub checks: Vec<Check>,
    /// Output directory; not part of the hash.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Worker threads; not part of the hash.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `.toml` or `.json` by extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text)?,
            Some("toml") => Self::from_toml_str(&text)?,
            other => return Err(Error::Config(format!("unknown config extension {other:?}"))),
        };
        // problem files are resolved next to the config
        if let (Some(p), Some(dir)) = (&cfg.problem_file, path.parent()) {
            if p.is_relative() {
                cfg.problem_file = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.grid.points < TorusGrid::MIN_POINTS || self.grid.steps == 0 || !(self.grid.horizon > 0.0) {
            return bad("grid needs at least 8 points, one step and a positive horizon");
        }
        if self.seeds.is_empty() {
            return bad("seed list is empty");
        }
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite());
        match &self.sweep {
            Sweep::EpsilonStability { epsilons } => {
                if !positive(epsilons) {
                    return bad("epsilon list must be nonempty and positive");
                }
            }
            Sweep::NashGap { players, epsilon, sample_points, mc_samples } => {
                if players.is_empty() || players.iter().any(|&n| n < 2) {
                    return bad("player list must be nonempty with N >= 2");
                }
                match epsilon {
                    EpsilonChoice::Schedule { beta } if !(*beta > 0.0) => return bad("schedule beta must be positive"),
                    EpsilonChoice::Fixed { value } if !(*value > 0.0) => return bad("epsilon must be positive"),
                    _ => {}
                }
                if *sample_points == 0 || *mc_samples == 0 {
                    return bad("sample counts must be positive");
                }
            }
            Sweep::Chaos { players, epsilon, replicas } => {
                if players.is_empty() || players.iter().any(|&n| n < 2) || !(*epsilon > 0.0) || *replicas < 2 {
                    return bad("chaos sweep needs N >= 2, epsilon > 0 and two replicas");
                }
            }
            Sweep::DerivativeCheck { epsilon, steps, direction } => {
                if !(*epsilon > 0.0) || !positive(steps) || !(direction.is_finite() && *direction != 0.0) {
                    return bad("derivative check needs epsilon > 0, positive steps and a nonzero direction");
                }
            }
            Sweep::AssumptionProbes { epsilons, radius, alpha, samples, pairs } => {
                if !positive(epsilons) || *radius < 1.0 || !(*alpha > 0.0 && *alpha <= 1.0) || *samples == 0 || *pairs == 0 {
                    return bad("assumption probes need epsilons, radius >= 1, alpha in (0, 1] and samples");
                }
            }
        }
        for c in &self.checks {
            if c.min.is_none() && c.max.is_none() {
                return bad("a check needs a lower or an upper bound");
            }
        }
        Ok(())
    }

    /// Canonical JSON of everything that determines the results.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.workers = None;
        // serde_json maps are sorted, so key order in the source is irrelevant
        let value = serde_json::to_value(&c).expect("config serializes");
        value.to_string()
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    fn problem(&self) -> Result<(ProblemFile, Option<Vec<u8>>)> {
        match &self.problem_file {
            Some(p) => {
                let bytes = std::fs::read(p)?;
                Ok((ProblemFile::load(p)?, Some(bytes)))
            }
            None => Ok((self.problem.clone(), None)),
        }
    }

    /// Hash over the config and the bytes of every file it references.
    pub fn input_hash(&self) -> Result<String> {
        let (_, bytes) = self.problem()?;
        let mut h = Sha256::new();
        for blob in [Some(self.canonical_json().into_bytes()), bytes].into_iter().flatten() {
            h.update(format!("blob {}\0", blob.len()).as_bytes());
            h.update(&blob);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Ready-made configurations for each sweep with bounds on the
    /// quantities each one is meant to establish.
    pub fn preset(kind: &str) -> Result<Self> {
        let check = |metric: &str, min: Option<f64>, max: Option<f64>| Check {
            metric: metric.into(),
            min,
            max,
        };
        let base = |name: &str, grid: GridSpec, sweep: Sweep, checks: Vec<Check>| ExperimentConfig {
            name: name.into(),
            problem: ProblemFile::default(),
            problem_file: None,
            grid,
            initial: InitialLaw::default(),
            sweep,
            seeds: vec![0],
            solver: MfgOptions::default(),
            checks,
            out: None,
            workers: None,
        };
        let cfg = match kind {
            "epsilon-stability" => base(
                kind,
                GridSpec { points: 128, steps: 200, horizon: 1.0 },
                Sweep::EpsilonStability { epsilons: vec![0.2, 0.1, 0.05] },
                vec![check("m_gap_slope", Some(0.7), Some(1.3)), check("sup_u_slope", Some(0.47), None)],
            ),
            "nash-gap" => base(
                kind,
                GridSpec { points: 32, steps: 16, horizon: 0.5 },
                Sweep::NashGap {
                    players: vec![2, 3, 4],
                    epsilon: EpsilonChoice::Fixed { value: 0.2 },
                    sample_points: default_sample_points(),
                    mc_samples: default_mc_samples(),
                },
                vec![check("sup_gap_nonincreasing", Some(1.0), None), check("residual_nonincreasing", Some(1.0), None)],
            ),
            "chaos" => base(
                kind,
                GridSpec { points: 16, steps: 16, horizon: 0.5 },
                Sweep::Chaos { players: vec![2, 3, 4], epsilon: 0.2, replicas: 64 },
                vec![
                    check("gap_decreasing", Some(1.0), None),
                    check("below_envelope", Some(1.0), None),
                    check("correlation_within", Some(1.0), None),
                ],
            ),
            "derivative-check" => base(
                kind,
                GridSpec { points: 32, steps: 20, horizon: 0.5 },
                Sweep::DerivativeCheck { epsilon: 0.2, steps: vec![1e-1, 1e-2, 1e-3], direction: 3.0 },
                vec![check("first_ratio_min", Some(5.0), None), check("first_ratio_max", None, Some(20.0)), check("second_decreasing", Some(1.0), None)],
            ),
            "assumption-probes" => base(
                kind,
                GridSpec { points: 128, steps: 1, horizon: 1.0 },
                Sweep::AssumptionProbes {
                    epsilons: vec![0.2, 0.1, 0.05],
                    radius: 5.0,
                    alpha: 1.0,
                    samples: 16,
                    pairs: 100,
                },
                vec![
                    check("closeness_slope", Some(0.8), Some(1.2)),
                    check("closeness_r2", Some(0.95), None),
                    check("min_monotonicity", Some(-1e-10), None),
                ],
            ),
            other => return Err(Error::Config(format!("unknown sweep {other:?}"))),
        };
        let mut cfg = cfg;
        if kind == "derivative-check" {
            // the cubic coupling keeps the second-order truncation error
            // above the rounding floor of the second difference at s = 1e-3
            cfg.problem.hamiltonian.profile = Profile::Alternate;
            cfg.problem.coupling.profile = Profile::Alternate;
            cfg.problem.terminal.profile = Profile::Alternate;
            cfg.solver.tol = 1e-13;
        }
        Ok(cfg)
    }
}

/// One CSV table: a header and rows in sweep order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Handle to the files written by [`run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config_hash: String,
    pub input_hash: String,
    pub sweep: String,
    pub table: Table,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
    pub failed_cells: usize,
    pub table_path: PathBuf,
    pub manifest_path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    input_hash: String,
    config: ExperimentConfig,
    sweep: String,
    seeds: Vec<u64>,
    metrics: BTreeMap<String, f64>,
    checks: Vec<CheckOutcome>,
    passed: bool,
    failed_cells: usize,
    cells: Vec<serde_json::Value>,
    timings: Timings,
}

#[derive(Debug, Serialize, Deserialize)]
struct Timings {
    total_seconds: f64,
    cell_seconds: Vec<f64>,
}

fn num(v: f64) -> String {
    format!("{v}")
}

struct CellOutput {
    row: Vec<String>,
    values: BTreeMap<&'static str, f64>,
    detail: serde_json::Value,
}

struct Context {
    system: MfgSystem,
    m0: DensityField,
    workers: usize,
}

/// Cell result with the error tag column filled on failure.
type Cell = (Result<CellOutput>, f64);

fn run_cells<T: Sync>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<CellOutput> + Sync) -> Vec<Cell> {
    parallel_map(items, workers, |item| {
        let start = Instant::now();
        let out = f(item);
        (out, start.elapsed().as_secs_f64())
    })
}

fn column(cells: &[Cell], key: &str) -> Option<Vec<f64>> {
    cells
        .iter()
        .map(|(c, _)| c.as_ref().ok().and_then(|c| c.values.get(key).copied()))
        .collect()
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn insert_fit(metrics: &mut BTreeMap<String, f64>, prefix: &str, xs: &[f64], ys: Option<Vec<f64>>) {
    if let Some(ys) = ys {
        if let Ok(fit) = fit_rate(xs, &ys) {
            metrics.insert(format!("{prefix}_slope"), fit.slope);
            metrics.insert(format!("{prefix}_r2"), fit.r2);
        }
    }
}

fn epsilon_stability(ctx: &Context, epsilons: &[f64], cells: &mut Vec<Cell>, metrics: &mut BTreeMap<String, f64>) -> Vec<String> {
    *cells = run_cells(epsilons, ctx.workers, |&eps| {
        let r = ctx.system.stability_gap(0.0, &ctx.m0, eps)?;
        Ok(CellOutput {
            row: vec![num(eps), num(r.sup_u_gap), num(r.grad_gap_l2), num(r.m_gap_l2), num(r.duality_pairing), r.iterations_local.to_string(), r.iterations_mollified.to_string()],
            values: BTreeMap::from([("sup_u", r.sup_u_gap), ("m_gap", r.m_gap_l2), ("grad_gap", r.grad_gap_l2), ("pairing", r.duality_pairing)]),
            detail: serde_json::to_value(r)?,
        })
    });
    insert_fit(metrics, "m_gap", epsilons, column(cells, "m_gap"));
    insert_fit(metrics, "sup_u", epsilons, column(cells, "sup_u"));
    insert_fit(metrics, "grad_gap", epsilons, column(cells, "grad_gap"));
    if let Some(p) = column(cells, "pairing") {
        metrics.insert("min_pairing".into(), p.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    ["epsilon", "sup_u_gap", "grad_gap_l2", "m_gap_l2", "duality_pairing", "iterations_local", "iterations_mollified"].map(String::from).to_vec()
}

fn nonincreasing(values: &[f64], noise: &[f64]) -> bool {
    values.windows(2).zip(noise.windows(2)).all(|(v, n)| v[1] <= v[0] + n[0] + n[1])
}

#[allow(clippy::too_many_arguments)]
fn nash_sweep(
    ctx: &Context,
    cfg: &ExperimentConfig,
    players: &[usize],
    epsilon: EpsilonChoice,
    sample_points: usize,
    cells: &mut Vec<Cell>,
    metrics: &mut BTreeMap<String, f64>,
) -> Vec<String> {
    let seed = cfg.seeds[0];
    // cells run one at a time; each fans its samples out over the workers
    *cells = run_cells(players, 1, |&n| {
        let eps = epsilon.for_players(n)?;
        let nc = NashConfig {
            players: n,
            points: cfg.grid.points,
            horizon: cfg.grid.horizon,
            steps: cfg.grid.steps,
            epsilon: eps,
            retain: Retain::Ends,
        };
        let sol = solve_nash(&ctx.system.hamiltonian, &ctx.system.coupling, &nc)?;
        let ev = MasterEvaluator::for_nash(ctx.system.hamiltonian, ctx.system.coupling, &nc, cfg.solver)?;
        let pts = stratified_points(n, nc.points, nc.steps, sample_points, seed);
        let diag = residual_probe(&ev, n, &pts, ctx.workers)?;
        let idx: Vec<Vec<usize>> = pts.iter().map(|p| p.index.clone()).collect();
        let gap = nash_gap(&sol, &ev, &ctx.system, &ctx.m0, &idx, ctx.workers)?;
        Ok(CellOutput {
            row: vec![
                n.to_string(),
                num(eps),
                num(gap.sup_gap),
                num(gap.sup_gap_noise),
                num(gap.avg_gap),
                num(gap.avg_gap_stderr),
                num(diag.alpha),
                num(diag.beta),
                num(diag.residual),
                num(diag.theta),
            ],
            values: BTreeMap::from([
                ("sup_gap", gap.sup_gap),
                ("noise", gap.sup_gap_noise),
                ("avg_gap", gap.avg_gap),
                ("avg_stderr", gap.avg_gap_stderr),
                ("residual", diag.residual),
            ]),
            detail: serde_json::json!({ "gap": gap, "diagnostics": diag, "max_principle_ratio": sol.max_principle_ratio, "cache": ev.cache_stats() }),
        })
    });
    if let (Some(g), Some(n)) = (column(cells, "sup_gap"), column(cells, "noise")) {
        metrics.insert("sup_gap_nonincreasing".into(), flag(nonincreasing(&g, &n)));
    }
    if let Some(r) = column(cells, "residual") {
        metrics.insert("residual_nonincreasing".into(), flag(nonincreasing(&r, &vec![0.0; r.len()])));
    }
    if let (Some(a), Some(s)) = (column(cells, "avg_gap"), column(cells, "avg_stderr")) {
        metrics.insert("avg_gap_decreasing".into(), flag(a.windows(2).all(|w| w[1] < w[0]) && nonincreasing(&a, &s)));
    }
    ["players", "epsilon", "sup_gap", "sup_gap_noise", "avg_gap", "avg_gap_stderr", "alpha", "beta", "residual", "theta"].map(String::from).to_vec()
}

fn chaos_sweep(ctx: &Context, cfg: &ExperimentConfig, players: &[usize], epsilon: f64, replicas: usize, cells: &mut Vec<Cell>, metrics: &mut BTreeMap<String, f64>) -> Vec<String> {
    let seeds = Seeds {
        noise: cfg.seeds[0],
        initial: cfg.seeds.get(1).copied().unwrap_or(cfg.seeds[0] ^ 0x9e37_79b9_7f4a_7c15),
    };
    let local = ctx.system.solve(0.0, &ctx.m0, CouplingKind::Local);
    let moll = ctx.system.solve(0.0, &ctx.m0, CouplingKind::Mollified(epsilon));
    *cells = run_cells(players, 1, |&n| {
        let local = local.as_ref().map_err(|e| Error::Coupling(e.to_string()))?;
        let moll = moll.as_ref().map_err(|e| Error::Coupling(e.to_string()))?;
        let nc = NashConfig {
            players: n,
            points: cfg.grid.points,
            horizon: cfg.grid.horizon,
            steps: cfg.grid.steps,
            epsilon,
            retain: Retain::All,
        };
        let nash = solve_nash(&ctx.system.hamiltonian, &ctx.system.coupling, &nc)?;
        let h = ctx.system.hamiltonian;
        let y_drift = NashDrift::new(h, &nash)?;
        let tilde_drift = MfgDrift::new(h, local);
        let hat_drift = MfgDrift::new(h, moll);
        let size = SimulationSize { players: n, replicas, workers: ctx.workers };
        let time = *local.time();
        let y = simulate(&y_drift, &ctx.m0, size, &time, seeds)?;
        let tilde = simulate(&tilde_drift, &ctx.m0, size, &time, seeds)?;
        let hat = simulate(&hat_drift, &ctx.m0, size, &time, seeds)?;
        let (gap, se) = coupled_gap(&y, &tilde)?;
        let (gap_hat, se_hat) = coupled_gap(&y, &hat)?;
        let eta = feedback_difference(&y, &y_drift, &tilde_drift)?;
        let envelope = gronwall_envelope(eta, tilde_drift.lipschitz(), time.horizon() - time.t0());
        let report = chaos_metrics(&tilde, &local.m)?;
        Ok(CellOutput {
            row: vec![
                n.to_string(),
                num(gap),
                num(se),
                num(gap_hat),
                num(se_hat),
                num(eta),
                num(envelope),
                num(report.endpoint_w1),
                num(report.correlation),
                num(report.correlation_stderr),
            ],
            values: BTreeMap::from([
                ("gap", gap),
                ("se", se),
                ("envelope", envelope),
                ("correlation", report.correlation),
                ("correlation_se", report.correlation_stderr),
            ]),
            detail: serde_json::json!({ "report": report, "gap_hat": gap_hat }),
        })
    });
    if let (Some(g), Some(s)) = (column(cells, "gap"), column(cells, "se")) {
        metrics.insert("gap_decreasing".into(), flag(nonincreasing(&g, &s)));
        if let Some(e) = column(cells, "envelope") {
            metrics.insert("below_envelope".into(), flag(g.iter().zip(&e).zip(&s).all(|((g, e), s)| *g <= e + 3.0 * s)));
        }
    }
    if let (Some(c), Some(s)) = (column(cells, "correlation"), column(cells, "correlation_se")) {
        metrics.insert("correlation_within".into(), flag(c.iter().zip(&s).all(|(c, s)| c.abs() <= 3.0 * s)));
    }
    ["players", "gap_local", "gap_local_stderr", "gap_mollified", "gap_mollified_stderr", "feedback_difference", "envelope", "endpoint_w1", "correlation", "correlation_stderr"]
        .map(String::from)
        .to_vec()
}

fn derivative_sweep(ctx: &Context, epsilon: f64, steps: &[f64], direction: f64, cells: &mut Vec<Cell>, metrics: &mut BTreeMap<String, f64>) -> Vec<String> {
    let grid = ctx.system.grid;
    let rho = ScalarField::from_fn(grid, |x| direction * (2.0 * PI * x[0]).sin()).expect("finite");
    let result: Result<DerivativeCheck> = derivative_check(&ctx.system, 0.0, &ctx.m0, &rho, CouplingKind::Mollified(epsilon), steps);
    match result {
        Ok(check) => {
            *cells = (0..steps.len())
                .map(|k| {
                    (
                        Ok(CellOutput {
                            row: vec![num(steps[k]), num(check.first[k]), num(check.second[k])],
                            values: BTreeMap::new(),
                            detail: serde_json::Value::Null,
                        }),
                        0.0,
                    )
                })
                .collect();
            let r = DerivativeCheck::ratios(&check.first);
            metrics.insert("first_ratio_min".into(), r.iter().cloned().fold(f64::INFINITY, f64::min));
            metrics.insert("first_ratio_max".into(), r.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            metrics.insert("second_decreasing".into(), flag(check.second.windows(2).all(|w| w[1] < w[0])));
        }
        Err(e) => *cells = steps.iter().map(|_| (Err(Error::Coupling(e.to_string())), 0.0)).collect(),
    }
    ["step", "first_mismatch", "second_mismatch"].map(String::from).to_vec()
}

#[allow(clippy::too_many_arguments)]
fn probe_sweep(
    ctx: &Context,
    cfg: &ExperimentConfig,
    epsilons: &[f64],
    radius: f64,
    alpha: f64,
    samples: usize,
    pairs: usize,
    cells: &mut Vec<Cell>,
    metrics: &mut BTreeMap<String, f64>,
) -> Vec<String> {
    let grid = ctx.system.grid;
    let seed = cfg.seeds[0];
    *cells = run_cells(epsilons, ctx.workers, |&eps| {
        let fc = MollifiedCoupling::with_epsilon(ctx.system.coupling, grid, eps)?;
        let closeness = closeness_probe(&fc, radius, alpha, samples, seed)?;
        let regularity = regularity_probe(&fc, alpha)?;
        let mut mono = f64::INFINITY;
        for k in 0..pairs as u64 {
            let a = random_smooth_density(&grid, seed.wrapping_add(2 * k));
            let b = random_smooth_density(&grid, seed.wrapping_add(2 * k + 1));
            mono = mono.min(monotonicity_probe(&fc, &a, &b)?);
        }
        Ok(CellOutput {
            row: vec![num(eps), num(closeness), num(regularity), num(mono)],
            values: BTreeMap::from([("closeness", closeness), ("mono", mono), ("regularity", regularity)]),
            detail: serde_json::Value::Null,
        })
    });
    insert_fit(metrics, "closeness", epsilons, column(cells, "closeness"));
    if let Some(m) = column(cells, "mono") {
        metrics.insert("min_monotonicity".into(), m.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    if let Some(r) = column(cells, "regularity") {
        metrics.insert("regularity_max".into(), r.iter().cloned().fold(0.0, f64::max));
    }
    ["epsilon", "closeness", "regularity", "min_monotonicity"].map(String::from).to_vec()
}

fn evaluate_checks(checks: &[Check], metrics: &BTreeMap<String, f64>) -> Vec<CheckOutcome> {
    checks
        .iter()
        .map(|c| {
            let value = metrics.get(&c.metric).copied();
            let passed = value.is_some_and(|v| c.min.is_none_or(|lo| v >= lo) && c.max.is_none_or(|hi| v <= hi));
            CheckOutcome {
                metric: c.metric.clone(),
                value,
                min: c.min,
                max: c.max,
                passed,
            }
        })
        .collect()
}

/// Runs the configured sweep and writes `table.csv` and `manifest.json`
/// into `out`.
pub fn run(config: &ExperimentConfig, out: &Path, workers: usize) -> Result<RunArtifact> {
    config.validate()?;
    let start = Instant::now();
    let config_hash = config.hash();
    let input_hash = config.input_hash()?;
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join("manifest.json");
    if let Ok(text) = std::fs::read_to_string(&manifest_path) {
        if let Ok(old) = serde_json::from_str::<Manifest>(&text) {
            if old.config_hash == config_hash && old.config.canonical_json() != config.canonical_json() {
                return Err(Error::Integrity(format!("config hash {config_hash} already names a different configuration in {}", out.display())));
            }
        }
    }
    let (problem, _) = config.problem()?;
    let (ham, coupling, _) = problem.build()?;
    let grid = TorusGrid::new(1, config.grid.points)?;
    let system = MfgSystem::new(ham, coupling, grid, config.grid.horizon, config.grid.steps)?.with_options(config.solver);
    let ctx = Context {
        m0: config.initial.density(grid)?,
        system,
        workers: workers.max(1),
    };
    let mut cells = Vec::new();
    let mut metrics = BTreeMap::new();
    let mut header = match &config.sweep {
        Sweep::EpsilonStability { epsilons } => epsilon_stability(&ctx, epsilons, &mut cells, &mut metrics),
        Sweep::NashGap { players, epsilon, sample_points, .. } => nash_sweep(&ctx, config, players, *epsilon, *sample_points, &mut cells, &mut metrics),
        Sweep::Chaos { players, epsilon, replicas } => chaos_sweep(&ctx, config, players, *epsilon, *replicas, &mut cells, &mut metrics),
        Sweep::DerivativeCheck { epsilon, steps, direction } => derivative_sweep(&ctx, *epsilon, steps, *direction, &mut cells, &mut metrics),
        Sweep::AssumptionProbes { epsilons, radius, alpha, samples, pairs } => probe_sweep(&ctx, config, epsilons, *radius, *alpha, *samples, *pairs, &mut cells, &mut metrics),
    };
    header.push("error".into());
    let width = header.len();
    let mut table = Table { header, rows: Vec::new() };
    let mut details = Vec::new();
    let mut failed_cells = 0;
    for (cell, _) in &cells {
        match cell {
            Ok(c) => {
                let mut row = c.row.clone();
                row.push(String::new());
                table.rows.push(row);
                details.push(c.detail.clone());
            }
            Err(e) => {
                failed_cells += 1;
                let mut row = vec![String::new(); width - 1];
                // the error text may hold commas
                let mut tag = String::new();
                let _ = write!(tag, "\"{}\"", e.to_string().replace('"', "'"));
                row.push(tag);
                table.rows.push(row);
                details.push(serde_json::json!({ "error": e.to_string() }));
            }
        }
    }
    let checks = evaluate_checks(&config.checks, &metrics);
    let passed = failed_cells == 0 && checks.iter().all(|c| c.passed);
    let table_path = out.join("table.csv");
    std::fs::write(&table_path, table.to_csv())?;
    let manifest = Manifest {
        config_hash: config_hash.clone(),
        input_hash: input_hash.clone(),
        config: config.clone(),
        sweep: config.sweep.name().into(),
        seeds: config.seeds.clone(),
        metrics: metrics.clone(),
        checks: checks.clone(),
        passed,
        failed_cells,
        cells: details,
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
            cell_seconds: cells.iter().map(|(_, t)| *t).collect(),
        },
    };
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunArtifact {
        config_hash,
        input_hash,
        sweep: config.sweep.name().into(),
        table,
        metrics,
        checks,
        passed,
        failed_cells,
        table_path,
        manifest_path,
    })
}

/// Summary of a finished run read back from its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub sweep: String,
    pub config_hash: String,
    pub passed: bool,
    pub failed_cells: usize,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<CheckOutcome>,
}

/// Reads `manifest.json` and checks that its recorded hash matches the
/// stored configuration.
pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.config.hash() != m.config_hash {
        return Err(Error::Integrity(format!("manifest in {} does not match its configuration", dir.display())));
    }
    Ok(RunSummary {
        sweep: m.sweep,
        config_hash: m.config_hash,
        passed: m.passed,
        failed_cells: m.failed_cells,
        metrics: m.metrics,
        checks: m.checks,
    })
}

/// Time grid of a config, for callers that simulate outside a sweep.
pub fn time_grid(config: &ExperimentConfig) -> Result<TimeGrid> {
    TimeGrid::new(0.0, config.grid.horizon, config.grid.steps)
}
