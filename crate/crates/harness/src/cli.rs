//! `kslab` command line.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kslab_core::coupling::run_coupled;
use kslab_core::io::{read_grid, read_trajectory, slice_csv, write_grid, TrajectoryWriter};
use kslab_core::particles::{
    em_step, init_ensemble, DirectInteractingDrift, EmpiricalChemistry, GridMemoryDrift, InitialChemDrift,
};
use kslab_core::pde::{diagnostics_csv, solve, steps_to, PdeParams, PdeState, System};
use kslab_core::transport::{w1_1d_unequal, w1_exact, w1_sliced, w1_vs_grid, EmpiricalMeasure, EXACT_MAX_POINTS};
use kslab_core::{BrownianStore, DriftPath, Error, GridField, Mode, Result};

use crate::config::{EpsSetting, SimConfig};
use crate::studies::{self, Modes};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "KS_WORKERS";

#[derive(Parser, Debug)]
#[command(name = "kslab", version, about = "Keller-Segel particle and PDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the delayed PDE (or the limit PDE with --limit or eps = 0).
    Pde {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        limit: bool,
    },
    /// Simulate one interacting ensemble and write its trajectory.
    Particles {
        #[command(flatten)]
        common: Common,
    },
    /// Coupled interacting, intermediate and limit runs at one (N, eps).
    Couple {
        #[command(flatten)]
        common: Common,
    },
    /// Pathwise distance to the intermediate system against N.
    SweepN {
        #[command(flatten)]
        common: Common,
    },
    /// Pathwise distance between intermediate and limit processes against eps.
    SweepEps {
        #[command(flatten)]
        common: Common,
    },
    /// W1 distance to the limit density under the eps(N) schedule.
    Chaos {
        #[command(flatten)]
        common: Common,
    },
    /// Sup and Lipschitz scaling of the interaction drift against eps.
    DriftScaling {
        #[command(flatten)]
        common: Common,
    },
    /// W1 distance between two snapshot files (trajectory: last frame; grid: density).
    W1 {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1024)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Configuration file (`key = value` lines).
    #[arg(short = 'c', long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set dt=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Particle count, or the list swept over N.
    #[arg(long = "N", value_delimiter = ',')]
    n: Vec<usize>,
    /// Cut-off (`auto` for the schedule), or the list swept over eps.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<String>,
    /// Number of seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the planned runs and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sweep {
    None,
    N,
    Eps,
}

enum Failure {
    MissingFile(String),
    Invalid(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Invalid(e)
    }
}

fn load(common: &Common, sweep: Sweep, base: Option<fn(usize) -> SimConfig>) -> std::result::Result<SimConfig, Failure> {
    let mut text = String::new();
    if let Some(path) = &common.config {
        text = std::fs::read_to_string(path)
            .map_err(|e| Failure::MissingFile(format!("cannot read config {}: {e}", path.display())))?;
        text.push('\n');
    }
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")).into());
        };
        text.push_str(&format!("{k} = {v}\n"));
    }
    let join = |v: &[String]| v.join(",");
    if !common.n.is_empty() {
        let list = common.n.iter().map(|n| n.to_string()).collect::<Vec<_>>();
        match sweep {
            Sweep::N => text.push_str(&format!("N_list = {}\n", join(&list))),
            _ => text.push_str(&format!("N = {}\n", list[0])),
        }
    }
    if !common.eps.is_empty() {
        match sweep {
            Sweep::Eps => text.push_str(&format!("eps_list = {}\n", join(&common.eps))),
            _ => text.push_str(&format!("eps = {}\n", common.eps[0])),
        }
    }
    if let Some(s) = common.seeds {
        text.push_str(&format!("n_seeds = {s}\n"));
    }
    let mut cfg = SimConfig::parse(&text)?;
    if let Some(base) = base {
        let mut full = base(cfg.d).canonical();
        full.push_str(&text);
        cfg = SimConfig::parse(&full)?;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(())
}

fn write_snapshot(path: &Path, field: &GridField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, field)
}

fn run_pde(cfg: &SimConfig, limit: bool) -> Result<()> {
    let eps = cfg.eps_for(cfg.n.max(3))?;
    cfg.validate_point(cfg.n.max(2), eps)?;
    let spec = cfg.grid()?;
    let init = cfg.initial_data()?;
    let system = if limit || eps == 0.0 { System::Limit } else { System::Intermediate { eps } };
    let params = PdeParams { dt: cfg.dt, lambda: cfg.lambda, interaction: cfg.interaction };
    let state = PdeState::new(system, init.rho0_grid(&spec), init.c0_grid(&spec)?, params)?;
    let run = solve(state, cfg.t_final, cfg.sample_every)?;
    std::fs::create_dir_all(&cfg.output)?;
    std::fs::write(cfg.output.join("diagnostics.csv"), diagnostics_csv(&run.diagnostics))?;
    write_snapshot(&cfg.output.join("rho.ksgf"), run.state.rho())?;
    write_snapshot(&cfg.output.join("c.ksgf"), &run.state.chemical().clone())?;
    if cfg.d == 1 {
        std::fs::write(cfg.output.join("rho.csv"), slice_csv(run.state.rho())?)?;
    }
    if let Some(last) = run.diagnostics.last() {
        println!("t = {} mass = {:.12} linf = {:.6e}", last.t, last.mass, last.linf);
    }
    Ok(())
}

fn run_particles(cfg: &SimConfig) -> Result<()> {
    let eps = cfg.eps_for(cfg.n)?;
    cfg.validate_point(cfg.n, eps)?;
    let spec = cfg.grid()?;
    let init = cfg.initial_data()?;
    let store = BrownianStore::new(cfg.seed, cfg.dt, cfg.d)?;
    let stride = if cfg.drift == DriftPath::Direct { cfg.history_stride_for(eps) } else { 0 };
    let mut ens = init_ensemble(&init, cfg.n, &store, cfg.half_width, Mode::Interacting)?.with_history(stride);
    let mut chem = match cfg.drift {
        DriftPath::Fast => Some(EmpiricalChemistry::new(&ens, spec, eps, cfg.lambda, cfg.interaction)?),
        DriftPath::Direct => None,
    };
    std::fs::create_dir_all(&cfg.output)?;
    let mut traj = TrajectoryWriter::new(BufWriter::new(File::create(cfg.output.join("trajectory.kspt"))?), &ens)?;
    traj.record(&ens)?;
    let steps = steps_to(cfg.t_final, cfg.dt)?;
    for step in 1..=steps {
        match chem.as_mut() {
            Some(c) => {
                let drift = GridMemoryDrift::new(c.memory_gradient(), &init, cfg.lambda, &ens)?;
                em_step(&mut ens, &drift, &store, eps)?;
                c.advance(&ens)?;
            }
            None if cfg.interaction => {
                let drift = DirectInteractingDrift::new(&init, eps, cfg.lambda, &ens)?;
                em_step(&mut ens, &drift, &store, eps)?;
            }
            None => em_step(&mut ens, &InitialChemDrift { init: &init, lambda: cfg.lambda }, &store, eps)?,
        }
        if step % cfg.sample_every == 0 || step == steps {
            traj.record(&ens)?;
        }
    }
    traj.finish()?;
    println!("N = {} eps = {eps} steps = {steps}", cfg.n);
    Ok(())
}

#[derive(Serialize)]
struct CoupleOutput<'a> {
    config_hash: String,
    version: String,
    config: String,
    report: &'a kslab_core::coupling::CouplingReport,
}

fn run_couple(cfg: &SimConfig) -> Result<()> {
    let eps = cfg.eps_for(cfg.n)?;
    let modes = Modes { intermediate: true, limit: true, w1: true };
    let report = run_coupled(&studies::coupled_config(cfg, cfg.n, eps, modes)?)?;
    std::fs::create_dir_all(&cfg.output)?;
    let out = CoupleOutput { config_hash: cfg.hash(), version: crate::version(), config: cfg.canonical(), report: &report };
    write_json(&cfg.output.join("report.json"), &out)?;
    let avg = |f: fn(&kslab_core::coupling::SeedCoupling) -> &Vec<f64>, k: usize| -> f64 {
        report.per_seed.iter().map(|s| f(s).get(k).copied().unwrap_or(f64::NAN)).sum::<f64>() / report.per_seed.len() as f64
    };
    let mut csv = format!("# config_hash={}\n# version={}\nt,interacting_intermediate,intermediate_limit,w1_interacting_limit\n", out.config_hash, out.version);
    for (k, t) in report.times.iter().enumerate() {
        csv.push_str(&format!(
            "{t:.17e},{:.17e},{:.17e},{:.17e}\n",
            avg(|s| &s.dist_interacting_intermediate, k),
            avg(|s| &s.dist_intermediate_limit, k),
            avg(|s| &s.w1_interacting_limit, k)
        ));
    }
    std::fs::write(cfg.output.join("report.csv"), csv)?;
    for (name, stat) in [
        ("sup |X^eps - Xbar^eps|", &report.interacting_intermediate),
        ("sup |Xbar^eps - X|", &report.intermediate_limit),
        ("sup W1", &report.sup_w1),
    ] {
        if let Some(s) = stat {
            println!("{name}: {:.6e} +/- {:.2e}", s.mean, s.stderr);
        }
    }
    Ok(())
}

fn print_report(report: &crate::report::ConvergenceReport) {
    for p in &report.points {
        println!("{} = {} eps = {:.6} mean = {:.6e} stderr = {:.2e}", report.axis, p.x, p.eps, p.mean, p.stderr);
    }
    match &report.fit {
        Some(f) => println!("slope = {:.4} [{:.4}, {:.4}]", f.slope, f.lower, f.upper),
        None => println!("slope: not fitted (fewer than two points)"),
    }
}

fn plan_n(cfg: &SimConfig) -> Result<Vec<(usize, f64)>> {
    cfg.n_list.iter().map(|&n| Ok((n, cfg.eps_for(n)?))).collect()
}

fn print_plan(plan: &[(usize, f64)], seeds: usize) {
    for (n, eps) in plan {
        println!("planned: N = {n} eps = {eps:.10} seeds = {seeds}");
    }
}

fn w1_files(a: &Path, b: &Path, samples: usize, seed: u64) -> Result<()> {
    enum Snap {
        Points(EmpiricalMeasure),
        Grid(GridField),
    }
    let open = |p: &Path| -> Result<Snap> {
        let bytes = std::fs::read(p)?;
        match bytes.get(..4) {
            Some(b"KSPT") => {
                let t = read_trajectory(&mut bytes.as_slice())?;
                let (_, last) = t.records.last().cloned().ok_or_else(|| Error::Format("empty trajectory".into()))?;
                Ok(Snap::Points(EmpiricalMeasure::new(t.dim, last)?))
            }
            Some(b"KSGF") => Ok(Snap::Grid(read_grid(&mut bytes.as_slice())?)),
            _ => Err(Error::Format(format!("{}: not a trajectory or grid snapshot", p.display()))),
        }
    };
    let value = match (open(a)?, open(b)?) {
        (Snap::Points(x), Snap::Points(y)) => {
            if x.dim() != y.dim() {
                return Err(Error::Shape("snapshots have different dimensions".into()));
            }
            if x.dim() == 1 {
                w1_1d_unequal(x.points(), y.points())?
            } else if x.len() == y.len() && x.len() <= EXACT_MAX_POINTS {
                w1_exact(&x, &y)?.value
            } else {
                w1_sliced(&x, &y, 64, seed)?.value
            }
        }
        (Snap::Points(x), Snap::Grid(g)) | (Snap::Grid(g), Snap::Points(x)) => w1_vs_grid(&x, &g, samples, seed)?.value,
        (Snap::Grid(_), Snap::Grid(_)) => return Err(Error::Domain("compare a trajectory against a grid or another trajectory".into())),
    };
    println!("W1 = {value:.12e}");
    Ok(())
}

fn run_drift_scaling(cfg: &SimConfig) -> Result<()> {
    let report = studies::drift_scaling_study(cfg, &cfg.eps_list)?;
    std::fs::create_dir_all(&cfg.output)?;
    std::fs::write(cfg.output.join("report.json"), report.to_json())?;
    std::fs::write(cfg.output.join("report.csv"), report.sup_drift.to_csv())?;
    std::fs::write(cfg.output.join("lipschitz.csv"), report.lipschitz.to_csv())?;
    std::fs::write(cfg.output.join("contraction.csv"), report.contraction.to_csv())?;
    print_report(&report.sup_drift);
    print_report(&report.lipschitz);
    Ok(())
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::W1 { a, b, samples, seed } => {
            for p in [&a, &b] {
                if !p.exists() {
                    return Err(Failure::MissingFile(format!("no such file: {}", p.display())));
                }
            }
            w1_files(&a, &b, samples, seed)?;
        }
        Command::Pde { common, limit } => {
            let cfg = load(&common, Sweep::None, None)?;
            println!("config hash: {}", cfg.hash());
            if !common.dry_run {
                run_pde(&cfg, limit)?;
            }
        }
        Command::Particles { common } => {
            let cfg = load(&common, Sweep::None, None)?;
            println!("config hash: {}", cfg.hash());
            if !common.dry_run {
                run_particles(&cfg)?;
            }
        }
        Command::Couple { common } => {
            let cfg = load(&common, Sweep::None, None)?;
            println!("config hash: {}", cfg.hash());
            let eps = cfg.eps_for(cfg.n)?;
            cfg.validate_point(cfg.n, eps)?;
            if common.dry_run {
                print_plan(&[(cfg.n, eps)], cfg.n_seeds);
            } else {
                run_couple(&cfg)?;
            }
        }
        Command::SweepN { common } => {
            let cfg = load(&common, Sweep::N, None)?;
            println!("config hash: {}", cfg.hash());
            let plan = plan_n(&cfg)?;
            for &(n, eps) in &plan {
                cfg.validate_point(n, eps)?;
            }
            print_plan(&plan, cfg.n_seeds);
            if !common.dry_run {
                let report = studies::sweep_n(&cfg, &cfg.n_list)?;
                report.write(&cfg.output)?;
                print_report(&report);
            }
        }
        Command::SweepEps { common } => {
            let cfg = load(&common, Sweep::Eps, None)?;
            println!("config hash: {}", cfg.hash());
            for &eps in &cfg.eps_list {
                cfg.validate_point(cfg.n, eps)?;
                println!("planned: N = {} eps = {eps} seeds = {}", cfg.n, cfg.n_seeds);
            }
            if !common.dry_run {
                let report = studies::sweep_eps(&cfg, &cfg.eps_list)?;
                report.write(&cfg.output)?;
                print_report(&report);
            }
        }
        Command::Chaos { common } => {
            let mut cfg = load(&common, Sweep::N, None)?;
            cfg.eps = EpsSetting::Auto;
            println!("config hash: {}", cfg.hash());
            let plan = studies::chaos_plan(&cfg, &cfg.n_list)?;
            print_plan(&plan, cfg.n_seeds);
            for &(n, eps) in &plan {
                cfg.validate_point(n, eps)?;
            }
            if !common.dry_run {
                let report = studies::chaos_study(&cfg, &cfg.n_list)?;
                report.write(&cfg.output)?;
                print_report(&report);
                println!("strictly decreasing: {}", report.strictly_decreasing());
            }
        }
        Command::DriftScaling { common } => {
            let cfg = load(&common, Sweep::Eps, Some(studies::drift_scaling_defaults))?;
            println!("config hash: {}", cfg.hash());
            studies::validate_drift_scaling(&cfg, &cfg.eps_list)?;
            for &eps in &cfg.eps_list {
                println!("planned: eps = {eps} N = {} seeds = {}", cfg.n, cfg.n_seeds);
            }
            if !common.dry_run {
                run_drift_scaling(&cfg)?;
            }
        }
    }
    Ok(())
}

/// Worker count from the environment, if set to a positive integer.
pub fn workers_from_env() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|n| *n > 0)
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 for an invalid configuration or failed run, 2 for usage errors and
/// missing input files.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let run = || match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::MissingFile(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            1
        }
    };
    match workers_from_env() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("error: cannot start {n} workers: {e}");
                1
            }
        },
        None => run(),
    }
}
