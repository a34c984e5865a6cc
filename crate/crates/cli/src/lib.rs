//! Command-line front end: configuration loading, command dispatch and file emission.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sweep_core::approximation::construct_approximant;
use sweep_core::crowd::{self, closed_form_solve, corridor_certificate, embed_planar, simulate_optimal, table1, table1_taus, CorridorConfig, CrowdError};
use sweep_core::dynamics::{catching_up_simulate, verify_feasibility, ControlSignal, Trajectory};
use sweep_core::ocp::{DiscreteDecision, SweepingOCP};
use sweep_core::optimality::{recover_duals, condition_residuals, DualVariables, RecoveryOptions, ResidualReport};
use sweep_core::shooting::{solve_shooting, ShootingOptions};
use thiserror::Error;

use crate::config::{default_config, load_config, ConfigError, LoadedConfig, RunConfig};
use crate::output::{
    config_hash, fmt_f64, history_csv, now_unix, residuals_csv, summary_csv, table1_csv, trajectory_csv, Artifacts, RunManifest,
};

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for a failed check.
pub const EXIT_FAILED_CHECK: i32 = 1;
/// Exit code for usage or configuration errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sweep", version, about = "Controlled sweeping processes: simulation, approximation, optimal control and optimality checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Catching-up simulation under the reference controls.
    Simulate(Common),
    /// Discrete approximant of the reference and its error budget.
    Approximate(Common),
    /// Single-shooting solve of the discrete problem.
    Solve(SolveArgs),
    /// Residuals of the necessary optimality conditions.
    Check(CheckArgs),
    /// Closed-form corridor solution and its simulation.
    Crowd(CrowdArgs),
    /// Optimal time, controls and contact time for τ = 1..10.
    Table1(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
    /// Number of cells, overriding the configuration.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct SolveArgs {
    #[command(flatten)]
    common: Common,
    /// Iteration limit of the descent.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DualSource {
    /// The closed-form dual family of the corridor optimum.
    Family,
    /// Duals recovered by least squares from the primal.
    Recover,
    /// All duals zero.
    Zero,
}

#[derive(Debug, Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    /// Where the duals come from; defaults to `family` for the corridor and `recover` otherwise.
    #[arg(long, value_enum)]
    duals: Option<DualSource>,
}

#[derive(Debug, Args)]
#[allow(non_snake_case)]
struct CrowdArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    x1: Option<f64>,
    #[arg(long)]
    x2: Option<f64>,
    #[arg(long)]
    xd: Option<f64>,
    #[arg(long = "L1")]
    L1: Option<f64>,
    #[arg(long = "L2")]
    L2: Option<f64>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Failed(String),
    #[error("cannot write outputs: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) | Self::Io(_) => EXIT_USAGE,
            Self::Failed(_) => EXIT_FAILED_CHECK,
        }
    }
}

impl From<CrowdError> for CliError {
    fn from(e: CrowdError) -> Self {
        match e {
            CrowdError::InvalidConfig(m) => Self::Config(ConfigError::Invalid { field: "crowd".into(), message: m }),
            other => Self::Failed(other.to_string()),
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// Result of a command: files to write, lines for standard output and whether its checks passed.
struct Report {
    artifacts: Artifacts,
    lines: Vec<String>,
    passed: bool,
}

struct Context {
    loaded: LoadedConfig,
    k: usize,
    quiet: bool,
    out: PathBuf,
}

impl Context {
    fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn context(common: &Common, command: &str) -> Result<Context, CliError> {
    let loaded = match &common.config {
        Some(path) => load_config(path)?,
        None => default_config(),
    };
    let k = common.k.unwrap_or(loaded.config.run.k);
    if k < 2 {
        return Err(CliError::Usage(format!("--k must be at least 2, got {k}")));
    }
    let out = common.out.clone().or_else(|| loaded.config.run.out.clone()).unwrap_or_else(|| PathBuf::from(format!("out-{command}")));
    Ok(Context { loaded, k, quiet: common.quiet, out })
}

/// The problem to work on: the configured generic one, else the corridor.
enum Problem {
    Corridor(CorridorConfig),
    Generic(Box<SweepingOCP>),
}

fn problem(ctx: &Context) -> Result<Problem, CliError> {
    let cfg = ctx.config();
    match &cfg.problem {
        Some(block) => Ok(Problem::Generic(Box::new(block.build(ctx.k, cfg.run.sign.into())?))),
        None => Ok(Problem::Corridor(cfg.corridor())),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SWEEP_THREADS") else { return Ok(()) };
    let n: usize = value.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Usage(format!("SWEEP_THREADS must be a positive integer, got {value:?}")))?;
    // A pool may already exist when running in-process more than once; the first setting stays.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn kv(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn decision_trajectory(p: &SweepingOCP, d: &DiscreteDecision) -> Result<Trajectory, CliError> {
    let times = (0..=d.k()).map(|j| d.time(j)).collect();
    Trajectory::from_states(&p.geometry, &p.dynamics, times, d.x.clone(), d.u.clone(), d.a.clone(), p.sign).map_err(failed)
}

fn planar_csv(traj: &Trajectory) -> String {
    let mut out = String::from("j,t,x1,y1,x2,y2\n");
    for (j, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
        let e = embed_planar(x);
        out.push_str(&format!("{j},{},{},{},{},{}\n", fmt_f64(*t), fmt_f64(e[0]), fmt_f64(e[1]), fmt_f64(e[2]), fmt_f64(e[3])));
    }
    out
}

fn reference_trajectory(p: &SweepingOCP, k: usize) -> Result<Trajectory, CliError> {
    let d = DiscreteDecision::from_reference(&p.reference, k);
    let ctrl = ControlSignal::on_mesh(d.u, d.a, d.horizon).map_err(failed)?;
    catching_up_simulate(&p.geometry, &p.dynamics, &ctrl, &p.x0, k, p.sign).map_err(failed)
}

fn cmd_simulate(ctx: &Context) -> Result<Report, CliError> {
    let mut artifacts = Artifacts::default();
    let mut summary = vec![kv("k", ctx.k)];
    let (set, traj) = match problem(ctx)? {
        Problem::Corridor(cfg) => {
            ctx.progress("simulating the corridor under the closed-form controls");
            let sim = simulate_optimal(&cfg, ctx.k)?;
            summary.push(kv("t_contact_closed_form", fmt_f64(sim.solution.t_contact)));
            summary.push(kv("t_contact_simulated", sim.contact_index.map_or(String::new(), |j| fmt_f64(sim.trajectory.times[j]))));
            summary.push(kv("min_gap", fmt_f64(sim.min_gap)));
            artifacts.add("positions.csv", planar_csv(&sim.trajectory));
            (crowd::corridor_geometry(&cfg)?, sim.trajectory)
        }
        Problem::Generic(p) => {
            ctx.progress("simulating under the reference controls");
            let traj = reference_trajectory(&p, ctx.k)?;
            (p.geometry.clone(), traj)
        }
    };
    let feas = verify_feasibility(&set, &traj, 1e-9);
    summary.push(kv("horizon", fmt_f64(traj.horizon())));
    for (i, v) in traj.final_state().iter().enumerate() {
        summary.push(kv(&format!("final_x_{i}"), fmt_f64(*v)));
    }
    summary.push(kv("min_constraint_value", fmt_f64(feas.min_value)));
    summary.push(kv("feasible", feas.passes));
    artifacts.add("trajectory.csv", trajectory_csv(&traj));
    artifacts.add("summary.csv", summary_csv(&summary));
    let lines = vec![format!("simulated {} cells on [0, {:.6}], min constraint value {:.3e}", ctx.k, traj.horizon(), feas.min_value)];
    Ok(Report { artifacts, lines, passed: feas.passes })
}

fn cmd_approximate(ctx: &Context) -> Result<Report, CliError> {
    let p = match problem(ctx)? {
        Problem::Corridor(cfg) => crowd::build_ocp(&cfg, ctx.k)?.0,
        Problem::Generic(p) => *p,
    };
    ctx.progress("building the discrete approximant");
    let approx = construct_approximant(&p.geometry, &p.dynamics, &p.reference, ctx.k).map_err(failed)?;
    let traj = Trajectory::from_states(&p.geometry, &p.dynamics, approx.times.clone(), approx.x.clone(), approx.u.clone(), approx.a.clone(), p.sign)
        .map_err(failed)?;
    let (e, b) = (approx.errors, approx.budget);
    let dominated = e.sup_state <= b.delta_k && e.sup_extension <= b.mu_x_k;
    let summary = vec![
        kv("k", ctx.k),
        kv("h", fmt_f64(b.h)),
        kv("sup_state_error", fmt_f64(e.sup_state)),
        kv("delta_k", fmt_f64(b.delta_k)),
        kv("sup_extension_error", fmt_f64(e.sup_extension)),
        kv("mu_x_k", fmt_f64(b.mu_x_k)),
        kv("l2_velocity_error", fmt_f64(e.l2_velocity)),
        kv("l2_control_error", fmt_f64(e.l2_control)),
        kv("mu_a_k", fmt_f64(b.mu_a_k)),
        kv("shift_variation", fmt_f64(e.var_uk)),
        kv("mu_tilde", fmt_f64(b.mu_tilde)),
        kv("endpoint_error", fmt_f64(e.endpoint)),
        kv("budget_dominates", dominated),
    ];
    let mut artifacts = Artifacts::default();
    artifacts.add("trajectory.csv", trajectory_csv(&traj));
    artifacts.add("summary.csv", summary_csv(&summary));
    let lines = vec![format!("sup error {:.3e} (budget {:.3e}), extension error {:.3e} (budget {:.3e})", e.sup_state, b.delta_k, e.sup_extension, b.mu_x_k)];
    Ok(Report { artifacts, lines, passed: dominated })
}

fn cmd_solve(ctx: &Context, max_iters: usize) -> Result<Report, CliError> {
    let (p, init, optimize_shift) = match problem(ctx)? {
        Problem::Corridor(cfg) => {
            let (p, init) = crowd::build_ocp(&cfg, ctx.k)?;
            (p, init, false)
        }
        Problem::Generic(p) => {
            let init = DiscreteDecision::from_reference(&p.reference, ctx.k);
            (*p, init, true)
        }
    };
    ctx.progress(&format!("shooting with {} cells", ctx.k));
    let opts = ShootingOptions { max_iters, optimize_shift, ..ShootingOptions::default() };
    let res = solve_shooting(&p, &init, opts).map_err(failed)?;
    let traj = decision_trajectory(&p, &res.best)?;
    let summary = vec![
        kv("k", ctx.k),
        kv("cost", fmt_f64(res.cost)),
        kv("horizon", fmt_f64(res.best.horizon)),
        kv("iterations", res.history.len().saturating_sub(1)),
        kv("status", format!("{:?}", res.status)),
        kv("feasible", res.feasibility.passes_implicit()),
    ];
    let mut artifacts = Artifacts::default();
    artifacts.add("trajectory.csv", trajectory_csv(&traj));
    artifacts.add("history.csv", history_csv(&res.history));
    artifacts.add("summary.csv", summary_csv(&summary));
    let lines = vec![format!("cost {:.6}, horizon {:.6}, status {:?}", res.cost, res.best.horizon, res.status)];
    Ok(Report { artifacts, lines, passed: true })
}

fn cmd_check(ctx: &Context, source: Option<DualSource>) -> Result<Report, CliError> {
    let tol = ctx.config().run.tolerance;
    let (p, d, family) = match problem(ctx)? {
        Problem::Corridor(cfg) => {
            let c = corridor_certificate(&cfg, ctx.k, [1.0, 1.0])?;
            (c.problem, c.decision, Some(c.duals))
        }
        Problem::Generic(p) => {
            let d = DiscreteDecision::from_reference(&p.reference, ctx.k);
            (*p, d, None)
        }
    };
    let source = source.unwrap_or(if family.is_some() { DualSource::Family } else { DualSource::Recover });
    ctx.progress(&format!("checking optimality conditions with {source:?} duals"));
    let report: ResidualReport = match (source, family) {
        (DualSource::Family, Some(duals)) => condition_residuals(&p, &d, &duals, tol).map_err(failed)?,
        (DualSource::Family, None) => return Err(CliError::Usage("the dual family is only available for the corridor problem".into())),
        (DualSource::Recover, _) => recover_duals(&p, &d, RecoveryOptions { tol, ..RecoveryOptions::default() }).map_err(failed)?.1,
        (DualSource::Zero, _) => condition_residuals(&p, &d, &DualVariables::zeros(&p, ctx.k), tol).map_err(failed)?,
    };
    let failing = report.failing();
    let mut artifacts = Artifacts::default();
    artifacts.add("residuals.csv", residuals_csv(&report));
    let mut lines: Vec<String> = report.entries().iter().map(|(n, r)| format!("{n:<24} {r:.3e} {}", if *r <= tol { "ok" } else { "FAIL" })).collect();
    lines.push(if failing.is_empty() { "all conditions hold".into() } else { format!("failing: {}", failing.join(", ")) });
    Ok(Report { artifacts, lines, passed: failing.is_empty() })
}

fn cmd_crowd(ctx: &Context, args: &CrowdArgs) -> Result<Report, CliError> {
    let mut cfg = ctx.config().corridor();
    cfg.tau = args.tau.unwrap_or(cfg.tau);
    cfg.x1_init = args.x1.unwrap_or(cfg.x1_init);
    cfg.x2_init = args.x2.unwrap_or(cfg.x2_init);
    cfg.x_dest = args.xd.unwrap_or(cfg.x_dest);
    cfg.l1 = args.L1.unwrap_or(cfg.l1);
    cfg.l2 = args.L2.unwrap_or(cfg.l2);
    let sol = closed_form_solve(&cfg)?;
    let fields = [
        ("T_opt", sol.t_opt),
        ("a1", sol.a1),
        ("a2", sol.a2),
        ("t_contact", sol.t_contact),
        ("cost", sol.cost),
        ("s1", sol.s1),
        ("s2", sol.s2),
        ("sb1", sol.sb1),
        ("sb2", sol.sb2),
        ("s_after", sol.s_after),
        ("Lambda", sol.lambda),
    ];
    let mut lines: Vec<String> = fields.iter().map(|(n, v)| format!("{n:<10} {v:.6}")).collect();
    lines.push(format!("{:<10} {}", "contact", sol.contact_regime));
    sol.require_contact()?;
    ctx.progress(&format!("simulating with {} cells", ctx.k));
    let sim = simulate_optimal(&cfg, ctx.k)?;
    let mut summary: Vec<(String, String)> = fields.iter().map(|(n, v)| kv(n, fmt_f64(*v))).collect();
    summary.push(kv("k", ctx.k));
    summary.push(kv("min_gap", fmt_f64(sim.min_gap)));
    summary.push(kv("t_contact_simulated", sim.contact_index.map_or(String::new(), |j| fmt_f64(sim.trajectory.times[j]))));
    let mut artifacts = Artifacts::default();
    artifacts.add("trajectory.csv", trajectory_csv(&sim.trajectory));
    artifacts.add("positions.csv", planar_csv(&sim.trajectory));
    artifacts.add("summary.csv", summary_csv(&summary));
    Ok(Report { artifacts, lines, passed: true })
}

fn cmd_table1(ctx: &Context) -> Result<Report, CliError> {
    let rows = table1(&ctx.config().corridor(), &table1_taus())?;
    let mut lines = Vec::new();
    for r in &rows {
        let values: Vec<String> = r.values.iter().map(|v| format!("{v:.4}")).collect();
        let status = if r.matches() { "ok".to_string() } else { format!("MISMATCH {:?} printed {:?}", r.mismatches, r.printed) };
        lines.push(format!("tau={:<4} {} {status}", r.tau, values.join(" ")));
    }
    let passed = rows.iter().all(|r| r.matches());
    let mut artifacts = Artifacts::default();
    artifacts.add("table1.csv", table1_csv(&rows));
    Ok(Report { artifacts, lines, passed })
}

fn execute(command: &Command) -> Result<i32, CliError> {
    configure_threads()?;
    let started = now_unix();
    let (name, common) = match command {
        Command::Simulate(c) => ("simulate", c),
        Command::Approximate(c) => ("approximate", c),
        Command::Solve(a) => ("solve", &a.common),
        Command::Check(a) => ("check", &a.common),
        Command::Crowd(a) => ("crowd", &a.common),
        Command::Table1(c) => ("table1", c),
    };
    let ctx = context(common, name)?;
    let report = match command {
        Command::Simulate(_) => cmd_simulate(&ctx)?,
        Command::Approximate(_) => cmd_approximate(&ctx)?,
        Command::Solve(a) => cmd_solve(&ctx, a.max_iters)?,
        Command::Check(a) => cmd_check(&ctx, a.duals)?,
        Command::Crowd(a) => cmd_crowd(&ctx, a)?,
        Command::Table1(_) => cmd_table1(&ctx)?,
    };
    let mut resolved = ctx.config().clone();
    resolved.run.k = ctx.k;
    let manifest = RunManifest {
        command: name.to_string(),
        config_hash: config_hash(&ctx.loaded.source),
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: started,
        config: serde_json::to_value(&resolved).map_err(|e| CliError::Failed(e.to_string()))?,
        files: Vec::new(),
    };
    report.artifacts.write(&ctx.out, manifest)?;
    for line in &report.lines {
        println!("{line}");
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILED_CHECK })
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
