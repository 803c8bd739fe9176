//! Command-line front end. Every subcommand reads a scenario, writes its
//! report files into the output directory, and finishes with `summary.json`.

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ScenarioConfig};
use crate::dynamics::{integrate, DynamicsError, Event, Termination};
use crate::ensemble::{run_ensemble_detailed, EnsembleError, Transported};
use crate::output::{fmt_f64, to_json_string};
use crate::spinor::DiracAlgebra;
use crate::transversality::{perturb_and_compare, transversality_report, SigmaPoint, TransversalityReport, Verdict};
use crate::validate::run_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PHYSICS: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "dirac-bohm",
    version,
    about = "Bohmian trajectories, ensembles and speed-of-light diagnostics for free Dirac waves",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Scenario file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the seed of the selected subcommand.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate trajectories from the `[simulate]` positions.
    Simulate,
    /// Sample a |psi|^2 ensemble, transport it, report speed-1 fractions and equivariance.
    Ensemble,
    /// Locate the speed-1 set in the `[sigma]` box and classify it.
    Sigma,
    /// Random four-wave perturbations of the model, classified like `sigma`.
    Perturb,
    /// Run the seeded invariant suite.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Ensemble => "ensemble",
            Command::Sigma => "sigma",
            Command::Perturb => "perturb",
            Command::Validate => "validate",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Physics(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Physics(_) => EXIT_PHYSICS,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::InvalidOptions(m) => CliError::Config(ConfigError::Invalid {
                field: "integrator".into(),
                message: m,
            }),
            other => CliError::Physics(other.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        match e {
            EnsembleError::Invalid(m) => CliError::Config(ConfigError::Invalid {
                field: "ensemble".into(),
                message: m,
            }),
            EnsembleError::Dynamics(d) => d.into(),
            other => CliError::Physics(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("dirac-bohm {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(CliError::Usage("--threads must be >= 1".into()));
            }
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Internal(e.to_string()))?
    };
    pool.install(|| run_in_pool(cli))
}

struct Context {
    out: PathBuf,
    quiet: bool,
    written: Vec<String>,
}

impl Context {
    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        fs::write(self.out.join(name), contents)?;
        self.note(name);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let text = to_json_string(value)?;
        self.write(name, text.as_bytes())
    }

    fn note(&mut self, name: &str) {
        if !self.quiet {
            eprintln!("wrote {}", self.out.join(name).display());
        }
        self.written.push(name.to_string());
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    version: &'a str,
    scenario_sha256: Option<String>,
    seed: Option<u64>,
    outputs: Vec<String>,
    result: Value,
    /// The only field that varies between identical runs.
    timing: Timing,
}

#[derive(Serialize)]
struct Timing {
    wall_seconds: f64,
}

fn run_in_pool(cli: &Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let loaded = match &cli.config {
        Some(path) => Some(ScenarioConfig::load(path)?),
        None if cli.command == Command::Validate => None,
        None => return Err(CliError::Usage(format!("`{}` needs --config PATH", cli.command.name()))),
    };
    let hash = loaded.as_ref().map(|(_, bytes)| {
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect::<String>()
    });
    let cfg = loaded.map(|(c, _)| c);

    let out = cli
        .out
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.output.as_ref()).map(|o| PathBuf::from(&o.dir)))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    let mut ctx = Context {
        out,
        quiet: cli.quiet,
        written: Vec::new(),
    };

    let outcome = match (cli.command, &cfg) {
        (Command::Validate, _) => validate(cfg.as_ref(), cli.seed, &mut ctx),
        (Command::Simulate, Some(c)) => simulate(c, &mut ctx).map(|r| (None, r)),
        (Command::Ensemble, Some(c)) => ensemble(c, cli.seed, &mut ctx),
        (Command::Sigma, Some(c)) => sigma(c, &mut ctx).map(|r| (None, r)),
        (Command::Perturb, Some(c)) => perturb(c, cli.seed, &mut ctx),
        (_, None) => unreachable!("config presence checked above"),
    };
    // Failed runs still leave a summary recording the error.
    let (seed, result) = match &outcome {
        Ok((seed, result)) => (*seed, result.clone()),
        Err(e) => (cli.seed, json!({ "error": e.to_string(), "exit_code": e.exit_code() })),
    };

    let mut outputs = ctx.written.clone();
    outputs.push("summary.json".into());
    let summary = RunSummary {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        scenario_sha256: hash,
        seed,
        outputs,
        result,
        timing: Timing {
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    };
    ctx.write_json("summary.json", &summary)?;
    outcome.map(|_| ())
}

#[derive(Serialize)]
struct TrajectoryEntry {
    index: usize,
    start: [f64; 3],
    csv: String,
    termination: Termination,
    max_speed: f64,
    events: Vec<Event>,
}

fn simulate(cfg: &ScenarioConfig, ctx: &mut Context) -> Result<Value, CliError> {
    let sim = cfg.simulate.as_ref().ok_or(ConfigError::Missing("simulate"))?;
    let model = cfg.build_model()?;
    let opts = cfg.integrator_options()?;
    let mut entries = Vec::new();
    for (i, q0) in sim.positions.iter().enumerate() {
        let traj = integrate(model.as_ref(), *q0, sim.t1, sim.t2, &opts).map_err(|e| match e {
            DynamicsError::NearNode { .. } => CliError::Physics(format!("position #{i}: {e}")),
            other => other.into(),
        })?;
        let name = format!("trajectory_{i:03}.csv");
        let file = fs::File::create(ctx.out.join(&name))?;
        traj.write_csv(BufWriter::new(file))?;
        ctx.note(&name);
        entries.push(TrajectoryEntry {
            index: i,
            start: *q0,
            csv: name,
            termination: traj.termination,
            max_speed: traj.max_speed,
            events: traj.events.clone(),
        });
    }
    ctx.write_json("events.json", &json!({ "trajectories": entries }))?;
    let max_speed = entries.iter().map(|e| e.max_speed).fold(0.0, f64::max);
    let speed_c = entries.iter().map(|e| e.events.iter().filter(|ev| ev.kind == crate::dynamics::EventKind::SpeedC).count()).sum::<usize>();
    Ok(json!({ "trajectories": entries.len(), "max_speed": max_speed, "speed_c_events": speed_c }))
}

fn ensemble(cfg: &ScenarioConfig, seed: Option<u64>, ctx: &mut Context) -> Result<(Option<u64>, Value), CliError> {
    let (mut spec, sampler) = cfg.ensemble_spec()?;
    if let Some(s) = seed {
        spec.region.seed = s;
    }
    let model = cfg.build_model()?;
    let opts = cfg.integrator_options()?;
    let (report, starts, transported) = run_ensemble_detailed(model.as_ref(), &spec, &sampler, &opts)?;
    ctx.write_json("ensemble_report.json", &report)?;
    if cfg.ensemble.as_ref().is_some_and(|e| e.write_endpoints_csv) {
        ctx.write("ensemble_endpoints.csv", endpoints_csv(&starts, &transported).as_bytes())?;
    }
    let result = json!({
        "n_accepted": report.n_accepted,
        "max_speed": report.max_speed,
        "speed_c_fractions": report.speed_c_fractions,
        "equivariance_distance": report.equivariance.map(|e| e.distance),
        "control_distance": report.equivariance_control.map(|e| e.distance),
    });
    Ok((Some(spec.region.seed), result))
}

fn endpoints_csv(starts: &[[f64; 3]], transported: &[Transported]) -> String {
    let mut out = String::from("index,x1,y1,z1,x2,y2,z2,max_speed,termination\n");
    for (i, (a, t)) in starts.iter().zip(transported).enumerate() {
        let term = serde_json::to_value(t.termination).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        out.push_str(&format!(
            "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{term}\n",
            a[0], a[1], a[2], t.end[0], t.end[1], t.end[2], t.max_speed
        ));
    }
    out
}

/// Report layout with flat point records.
#[derive(Serialize)]
struct SigmaReportOut {
    verdict: Verdict,
    min_margin: Option<f64>,
    seed_count: usize,
    converged_count: usize,
    failed_count: usize,
    grid_points: usize,
    degenerate_fraction: f64,
    seed_threshold: f64,
    points_truncated: bool,
    points: Vec<PointOut>,
}

#[derive(Serialize)]
struct PointOut {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    residual: f64,
    normalized_residual: f64,
    margin: f64,
    psi_norm: f64,
}

impl From<&SigmaPoint> for PointOut {
    fn from(p: &SigmaPoint) -> Self {
        PointOut {
            t: p.x.t,
            x: p.x.q[0],
            y: p.x.q[1],
            z: p.x.q[2],
            residual: p.residual,
            normalized_residual: p.normalized_residual,
            margin: p.margin,
            psi_norm: p.psi_norm,
        }
    }
}

impl From<&TransversalityReport> for SigmaReportOut {
    fn from(r: &TransversalityReport) -> Self {
        SigmaReportOut {
            verdict: r.verdict,
            min_margin: r.min_margin,
            seed_count: r.seed_count,
            converged_count: r.converged_count,
            failed_count: r.failed_count,
            grid_points: r.grid_points,
            degenerate_fraction: r.degenerate_fraction,
            seed_threshold: r.seed_threshold,
            points_truncated: r.points_truncated,
            points: r.points.iter().map(PointOut::from).collect(),
        }
    }
}

fn sigma_csv(points: &[SigmaPoint]) -> String {
    let mut s = String::from("t,x,y,z,residual,normalized_residual,margin,psi_norm\n");
    for p in points {
        let row = [p.x.t, p.x.q[0], p.x.q[1], p.x.q[2], p.residual, p.normalized_residual, p.margin, p.psi_norm];
        s.push_str(&row.map(fmt_f64).join(","));
        s.push('\n');
    }
    s
}

fn sigma(cfg: &ScenarioConfig, ctx: &mut Context) -> Result<Value, CliError> {
    let (bx, opts, csv) = cfg.sigma_box()?;
    let model = cfg.build_model()?;
    let report = transversality_report(model.as_ref(), &bx, &opts).map_err(|e| CliError::Internal(e.to_string()))?;
    ctx.write_json("sigma_report.json", &SigmaReportOut::from(&report))?;
    if csv {
        ctx.write("sigma_points.csv", sigma_csv(&report.points).as_bytes())?;
    }
    Ok(json!({
        "verdict": report.verdict,
        "min_margin": report.min_margin,
        "converged_count": report.converged_count,
        "degenerate_fraction": report.degenerate_fraction,
    }))
}

fn perturb(cfg: &ScenarioConfig, seed: Option<u64>, ctx: &mut Context) -> Result<(Option<u64>, Value), CliError> {
    let p = cfg.perturb.ok_or(ConfigError::Missing("perturb"))?;
    let (bx, opts, _) = cfg.sigma_box()?;
    let model = cfg.build_model()?;
    let seed = seed.unwrap_or(p.seed);
    let stats = perturb_and_compare(model, p.amplitude, p.trials, p.k, &bx, seed, &opts)
        .map_err(|e| CliError::Internal(e.to_string()))?;
    ctx.write_json("perturb_report.json", &stats)?;
    let result = json!({
        "base_verdict": stats.base_verdict,
        "transverse_fraction": stats.transverse_fraction,
        "min_margin": stats.min_margin,
        "trials": stats.trials.len(),
    });
    Ok((Some(seed), result))
}

fn validate(cfg: Option<&ScenarioConfig>, seed: Option<u64>, ctx: &mut Context) -> Result<(Option<u64>, Value), CliError> {
    let v = cfg.and_then(|c| c.validate);
    let seed = seed.or(v.map(|v| v.seed)).unwrap_or(0);
    let samples = v.map_or(100_000, |v| v.samples);
    let report = run_suite(&DiracAlgebra::dirac(), seed, samples);
    ctx.write_json("validation_report.json", &report)?;
    if !ctx.quiet {
        for c in &report.checks {
            eprintln!("{} {:<40} worst {:.3e} (tol {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.worst, c.tolerance);
        }
    }
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(CliError::Internal(format!("invariant checks failed: {}", failed.join(", "))));
    }
    Ok((Some(seed), json!({ "passed": report.passed, "checks": report.checks.len() })))
}
