use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mfglab::coupling::ProblemFile;
use mfglab::grid::{write_field, ScalarField, TimeGrid, TorusGrid};
use mfglab::harness::{read_summary, run, EpsilonChoice, ExperimentConfig, GridSpec, InitialLaw, RunArtifact, Sweep};
use mfglab::measures::{read_atoms_csv, w1_circle};
use mfglab::mfg::{CouplingKind, MfgOptions, MfgSystem};
use mfglab::nash::{solve_nash, MasterEvaluator, NashConfig, Retain};
use mfglab::particles::{chaos_metrics, coupled_gap, simulate, Drift, MfgDrift, NashDrift, ProjectedMasterDrift, Seeds, SimulationSize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mfglab", version, about = "Mean field game and Nash system experiments on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Experiment config (TOML or JSON); the built-in preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// Problem file (TOML or JSON); the default profile when absent.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    horizon: f64,
}

impl ProblemArgs {
    fn problem(&self) -> Result<ProblemFile> {
        Ok(match &self.problem {
            Some(p) => ProblemFile::load(p)?,
            None => ProblemFile::default(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Closeness, monotonicity and regularity of the mollified coupling.
    ProbeAssumptions(SweepArgs),
    /// Local versus mollified MFG gaps over a list of radii.
    SweepEpsilon(SweepArgs),
    /// Nash versus projected master gaps over player counts.
    SweepNash(SweepArgs),
    /// Particle systems under shared noise.
    Chaos(SweepArgs),
    /// Linearized systems against finite differences of the solver.
    DerivativeCheck(SweepArgs),
    /// Summaries of finished runs.
    Report {
        /// Run directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// N-player Nash system.
    #[command(subcommand)]
    Nash(NashCommand),
    /// Particle simulations.
    #[command(subcommand)]
    Particles(ParticlesCommand),
    /// Single MFG solve.
    #[command(subcommand)]
    Mfg(MfgCommand),
    /// Exact Wasserstein-1 distance between two atom lists on the circle.
    W1 { a: PathBuf, b: PathBuf },
}

#[derive(Subcommand)]
enum NashCommand {
    /// Solve on the tensor grid and dump the initial slices.
    Solve {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value = "nash-out")]
        out: PathBuf,
    },
    /// Gap sweep over player counts.
    Gap {
        /// Comma-separated player counts.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        players: Vec<usize>,
        /// Use `ε_N = (ln N)^{-β}` with this `β`.
        #[arg(long, conflicts_with = "eps")]
        schedule: Option<f64>,
        #[arg(long)]
        eps: Option<f64>,
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "nash-gap-out")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DriftChoice {
    Nash,
    Master,
    MfgEps,
    MfgLocal,
}

#[derive(Subcommand)]
enum ParticlesCommand {
    Run {
        #[arg(long, value_enum)]
        drift: DriftChoice,
        #[arg(long)]
        n: usize,
        /// Replicas.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value = "particles-out")]
        out: PathBuf,
        /// Also write the full wrapped paths as little-endian f64.
        #[arg(long)]
        dump: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Subcommand)]
enum MfgCommand {
    Solve {
        /// Mollifier radius; the local coupling when absent.
        #[arg(long)]
        eps: Option<f64>,
        #[command(flatten)]
        problem: ProblemArgs,
        #[arg(long, default_value = "mfg-out")]
        out: PathBuf,
    },
}

fn workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn print_artifact(a: &RunArtifact) {
    println!("sweep {} config {}", a.sweep, a.config_hash);
    for (k, v) in &a.metrics {
        println!("  {k} = {v}");
    }
    for c in &a.checks {
        let bounds = format!("[{}, {}]", c.min.map_or("-inf".into(), |v| v.to_string()), c.max.map_or("inf".into(), |v| v.to_string()));
        println!("  {} {} = {:?} in {bounds}", if c.passed { "PASS" } else { "FAIL" }, c.metric, c.value);
    }
    if a.failed_cells > 0 {
        println!("  {} cell(s) failed, see {}", a.failed_cells, a.table_path.display());
    }
    println!("wrote {} and {}", a.table_path.display(), a.manifest_path.display());
}

fn run_sweep(kind: &str, args: SweepArgs) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::preset(kind)?,
    };
    if cfg.sweep.name() != kind {
        bail!("config describes a {} sweep, not {kind}", cfg.sweep.name());
    }
    if let Some(s) = args.seed {
        cfg.seeds[0] = s;
    }
    let out = args.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(format!("{kind}-out")));
    let artifact = run(&cfg, &out, workers(args.workers.or(cfg.workers)))?;
    print_artifact(&artifact);
    Ok(artifact.passed)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn nash_solve(n: usize, eps: f64, problem: &ProblemArgs, out: &Path) -> Result<bool> {
    let (h, f, _) = problem.problem()?.build()?;
    let cfg = NashConfig {
        players: n,
        points: problem.grid,
        horizon: problem.horizon,
        steps: problem.steps,
        epsilon: eps,
        retain: Retain::Ends,
    };
    let sol = solve_nash(&h, &f, &cfg)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("player,max_abs_t0,max_principle_ratio\n");
    for i in 0..n {
        let slice = sol.slice(i, 0)?.to_vec();
        let max = slice.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        writeln!(csv, "{i},{max},{}", sol.max_principle_ratio)?;
        write_field(&out.join(format!("v{i}")), &ScalarField::spatial(*sol.tensor_grid(), slice)?)?;
    }
    fs::write(out.join("summary.csv"), csv)?;
    write_json(&out.join("manifest.json"), &serde_json::json!({ "config": cfg, "max_principle_ratio": sol.max_principle_ratio }))?;
    println!("solved N = {n} on {}^{n} nodes, wrote {}", problem.grid, out.display());
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn nash_gap_cmd(players: Vec<usize>, schedule: Option<f64>, eps: Option<f64>, problem: &ProblemArgs, samples: usize, seed: u64, out: &Path, workers_: Option<usize>) -> Result<bool> {
    let epsilon = match (schedule, eps) {
        (Some(beta), _) => EpsilonChoice::Schedule { beta },
        (None, Some(value)) => EpsilonChoice::Fixed { value },
        (None, None) => EpsilonChoice::Fixed { value: 0.2 },
    };
    let problem_file = problem.problem.as_deref().map(fs::canonicalize).transpose()?;
    let cfg = ExperimentConfig {
        name: "nash-gap".into(),
        problem: ProblemFile::default(),
        problem_file,
        grid: GridSpec {
            points: problem.grid,
            steps: problem.steps,
            horizon: problem.horizon,
        },
        initial: InitialLaw::default(),
        sweep: Sweep::NashGap {
            players,
            epsilon,
            sample_points: samples,
            mc_samples: 10_000,
        },
        seeds: vec![seed],
        solver: MfgOptions::default(),
        checks: Vec::new(),
        out: None,
        workers: None,
    };
    let a = run(&cfg, out, workers(workers_))?;
    print_artifact(&a);
    Ok(a.passed)
}

#[allow(clippy::too_many_arguments)]
fn particles_run(choice: DriftChoice, n: usize, k: usize, seed: u64, eps: f64, problem: &ProblemArgs, out: &Path, dump: bool, workers_: Option<usize>) -> Result<bool> {
    let (h, f, _) = problem.problem()?.build()?;
    let grid = TorusGrid::new(1, problem.grid)?;
    let system = MfgSystem::new(h, f, grid, problem.horizon, problem.steps)?;
    let m0 = InitialLaw::default().density(grid)?;
    let local = system.solve(0.0, &m0, CouplingKind::Local)?;
    let time: TimeGrid = *local.time();
    let size = SimulationSize {
        players: n,
        replicas: k,
        workers: workers(workers_),
    };
    let seeds = Seeds { noise: seed, initial: seed ^ 0x9e37_79b9_7f4a_7c15 };
    let nash_cfg = NashConfig {
        players: n,
        points: problem.grid,
        horizon: problem.horizon,
        steps: problem.steps,
        epsilon: eps,
        retain: Retain::All,
    };
    let reference = MfgDrift::new(h, &local);
    let nash;
    let master;
    let moll;
    let drift: Box<dyn Drift + '_> = match choice {
        DriftChoice::Nash => {
            nash = solve_nash(&h, &f, &nash_cfg)?;
            Box::new(NashDrift::new(h, &nash)?)
        }
        DriftChoice::Master => {
            master = MasterEvaluator::for_nash(h, f, &nash_cfg, MfgOptions::default())?;
            Box::new(ProjectedMasterDrift::new(&master))
        }
        DriftChoice::MfgEps => {
            moll = system.solve(0.0, &m0, CouplingKind::Mollified(eps))?;
            Box::new(MfgDrift::new(h, &moll))
        }
        DriftChoice::MfgLocal => Box::new(MfgDrift::new(h, &local)),
    };
    let ens = simulate(drift.as_ref(), &m0, size, &time, seeds)?;
    let base = simulate(&reference, &m0, size, &time, seeds)?;
    let report = chaos_metrics(&ens, &local.m)?;
    let (gap, se) = coupled_gap(&ens, &base)?;
    fs::create_dir_all(out)?;
    let mut w1 = String::from("step,time,w1_to_local_flow\n");
    for (step, v) in report.w1_curve.iter().enumerate() {
        writeln!(w1, "{step},{},{v}", time.time(step))?;
    }
    fs::write(out.join("w1.csv"), w1)?;
    fs::write(out.join("gap.csv"), format!("reference,mean_sup_gap,stderr\nmfg-local,{gap},{se}\n"))?;
    if dump {
        ens.write_binary(&out.join("paths.bin"))?;
    }
    write_json(
        &out.join("manifest.json"),
        &serde_json::json!({
            "drift": format!("{:?}", ens.kind),
            "players": n,
            "replicas": k,
            "seeds": seeds,
            "time": time,
            "report": report,
            "gap_to_local": { "mean": gap, "stderr": se },
            "path_layout": "[replica][player][time node] little-endian f64",
        }),
    )?;
    println!("endpoint W1 {} ± {}, gap to the local MFG system {gap} ± {se}", report.endpoint_w1, report.endpoint_w1_stderr);
    Ok(true)
}

fn mfg_solve(eps: Option<f64>, problem: &ProblemArgs, out: &Path) -> Result<bool> {
    let (h, f, _) = problem.problem()?.build()?;
    let grid = TorusGrid::new(1, problem.grid)?;
    let system = MfgSystem::new(h, f, grid, problem.horizon, problem.steps)?;
    let m0 = InitialLaw::default().density(grid)?;
    let kind = eps.map_or(CouplingKind::Local, CouplingKind::Mollified);
    let sol = system.solve(0.0, &m0, kind)?;
    fs::create_dir_all(out)?;
    write_field(&out.join("u"), &sol.u)?;
    write_field(&out.join("m"), &sol.m)?;
    write_json(&out.join("manifest.json"), &serde_json::to_value(sol.manifest(&system.options))?)?;
    println!("converged in {} iterations, residual {}", sol.iterations, sol.fixed_point_residual);
    Ok(true)
}

fn report(dirs: &[PathBuf]) -> Result<bool> {
    let mut all = true;
    for d in dirs {
        let s = read_summary(d).with_context(|| format!("reading {}", d.display()))?;
        println!("{} [{}] {}", d.display(), s.sweep, if s.passed { "PASS" } else { "FAIL" });
        for c in &s.checks {
            println!("  {} {} = {:?}", if c.passed { "PASS" } else { "FAIL" }, c.metric, c.value);
        }
        all &= s.passed;
    }
    Ok(all)
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::ProbeAssumptions(a) => run_sweep("assumption-probes", a),
        Command::SweepEpsilon(a) => run_sweep("epsilon-stability", a),
        Command::SweepNash(a) => run_sweep("nash-gap", a),
        Command::Chaos(a) => run_sweep("chaos", a),
        Command::DerivativeCheck(a) => run_sweep("derivative-check", a),
        Command::Report { dirs } => report(&dirs),
        Command::Nash(NashCommand::Solve { n, eps, problem, out }) => nash_solve(n, eps, &problem, &out),
        Command::Nash(NashCommand::Gap {
            players,
            schedule,
            eps,
            problem,
            samples,
            seed,
            out,
            workers,
        }) => nash_gap_cmd(players, schedule, eps, &problem, samples, seed, &out, workers),
        Command::Particles(ParticlesCommand::Run {
            drift,
            n,
            k,
            seed,
            eps,
            problem,
            out,
            dump,
            workers,
        }) => particles_run(drift, n, k, seed, eps, &problem, &out, dump, workers),
        Command::Mfg(MfgCommand::Solve { eps, problem, out }) => mfg_solve(eps, &problem, &out),
        Command::W1 { a, b } => {
            let a = read_atoms_csv(&a)?;
            let b = read_atoms_csv(&b)?;
            println!("{}", w1_circle(&a, &b)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
