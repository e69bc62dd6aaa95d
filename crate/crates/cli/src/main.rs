//! `acpsbc`: run scenarios, sweeps, noise comparisons and seed batches.
//!
//! Exit status: 0 on success, 2 when the scenario or arguments fail
//! validation, 3 when a run aborts with a solver or model failure, 1 when
//! outputs cannot be written.

mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acpsbc::sim::{self, Method, Metrics, Scenario, TrajectoryLog};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "acpsbc", version, about = "Conformal safety barrier certificates for multi-robot MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed override; falls back to ACPSBC_SEED, then the scenario's seed.
    #[arg(long, env = "ACPSBC_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum, default_value = "on")]
    plots: Toggle,
}

#[derive(Subcommand)]
enum Command {
    /// One closed-loop run.
    Run(Common),
    /// One run per parameter value, all with the same seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
    },
    /// Both methods under gaussian, uniform and mixture noise.
    Compare(Common),
    /// Seeds 1..=n, summarized per seed and in aggregate.
    Batch {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "acp_sbc")]
    AcpSbc,
    #[value(name = "cbf_baseline")]
    CbfBaseline,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::AcpSbc => Method::AcpSbc,
            MethodArg::CbfBaseline => Method::CbfBaseline,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    #[value(name = "H")]
    Horizon,
    Gamma,
    Alpha,
}

impl Param {
    fn name(self) -> &'static str {
        match self {
            Param::Horizon => "H",
            Param::Gamma => "gamma",
            Param::Alpha => "alpha",
        }
    }
}

enum Failure {
    Invalid(String),
    Solver(String),
    Output(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Output(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Solver(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Solver(m) | Failure::Output(m) => m,
        }
    }
}

impl From<acpsbc::Error> for Failure {
    fn from(e: acpsbc::Error) -> Self {
        use acpsbc::Error::*;
        match e {
            Config { .. } | Parse(_) | Io(_) => Failure::Invalid(e.to_string()),
            DegenerateGradient { .. } | Contract(_) => Failure::Solver(e.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Sweep { common, param, values } => cmd_sweep(&common, param, &values),
        Command::Compare(c) => cmd_compare(&c),
        Command::Batch { common, seeds } => cmd_batch(&common, seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load(c: &Common) -> Outcome<Scenario> {
    let mut sc = Scenario::load(&c.scenario)?;
    if let Some(seed) = c.seed {
        sc = sc.with_seed(seed);
    }
    if let Some(m) = c.method {
        sc = sc.with_method(m.into());
    }
    Ok(sc)
}

fn write(path: &Path, contents: &str) -> Outcome<()> {
    std::fs::write(path, contents).map_err(|e| Failure::Output(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Outcome<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Output(format!("{}: {e}", path.display())))
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes the artifacts of one run into `dir` and returns its metrics.
fn write_run(dir: &Path, sc: &Scenario, log: &TrajectoryLog, plots: Toggle) -> Outcome<Metrics> {
    mkdir(dir)?;
    let metrics = Metrics::from_log(log, sc.goal_tolerance_m);
    write(&dir.join("trajectory.csv"), &log.to_csv_string())?;
    write(&dir.join("metrics.json"), &metrics.to_json())?;
    write(&dir.join("metadata.json"), &log.metadata_json())?;
    write(&dir.join("states.csv"), &log.states_csv())?;
    if plots == Toggle::On {
        write(&dir.join("trajectory.svg"), &plot::trajectory_svg(log, &sc.obstacles))?;
        write(&dir.join("min_distance.svg"), &plot::min_distance_svg(log))?;
    }
    Ok(metrics)
}

fn cmd_run(c: &Common) -> Outcome<()> {
    let sc = load(c)?;
    let log = sim::run(&sc)?;
    let m = write_run(&c.out, &sc, &log, c.plots)?;
    println!(
        "{} seed {} {}: min_h {} collided {} goal step {}",
        m.scenario,
        m.seed,
        m.method,
        fmt_opt(m.min_h),
        m.collided,
        fmt_opt(m.goal_reach_step)
    );
    Ok(())
}

fn apply(sc: &Scenario, param: Param, value: f64) -> Outcome<Scenario> {
    let mut sc = sc.clone();
    match param {
        Param::Horizon => {
            if value.fract() != 0.0 || value < 0.0 {
                return Err(Failure::Invalid(format!(
                    "invalid configuration `horizon`: {value} is not a whole number"
                )));
            }
            sc.mpc.horizon = value as usize;
        }
        Param::Gamma => sc.gamma = value,
        Param::Alpha => sc.acp.alpha = value,
    }
    sc.validate()?;
    Ok(sc)
}

fn min_clearance(m: &Metrics) -> Option<f64> {
    match (m.min_clearance_rr, m.min_clearance_ro) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

fn cmd_sweep(c: &Common, param: Param, values: &[f64]) -> Outcome<()> {
    let base = load(c)?;
    let scenarios = values
        .iter()
        .map(|v| apply(&base, param, *v))
        .collect::<Outcome<Vec<_>>>()?;
    let logs = scenarios
        .par_iter()
        .map(|sc| sim::run(sc).map_err(Failure::from))
        .collect::<Outcome<Vec<_>>>()?;
    mkdir(&c.out)?;
    let mut table = String::from("param,value,min_clearance_m,min_h,coverage_lag1,goal_reach_step\n");
    let mut runs = Vec::new();
    for ((v, sc), log) in values.iter().zip(&scenarios).zip(logs) {
        let label = format!("{}={v}", param.name());
        let m = write_run(&c.out.join(format!("{}_{v}", param.name())), sc, &log, c.plots)?;
        let _ = writeln!(
            table,
            "{},{v},{},{},{},{}",
            param.name(),
            fmt_opt(min_clearance(&m)),
            fmt_opt(m.min_h),
            fmt_opt(m.coverage.get(&1)),
            fmt_opt(m.goal_reach_step)
        );
        runs.push((label, log));
    }
    write(&c.out.join("sweep.csv"), &table)?;
    if c.plots == Toggle::On {
        write(&c.out.join("sweep.svg"), &plot::overlay_svg(&runs, &base.obstacles))?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_compare(c: &Common) -> Outcome<()> {
    let base = load(c)?;
    let cases: Vec<(Method, &'static str, Scenario)> = [Method::AcpSbc, Method::CbfBaseline]
        .into_iter()
        .flat_map(|m| {
            let base = &base;
            sim::noise_suite()
                .into_iter()
                .map(move |(name, noise)| (m, name, base.clone().with_method(m).with_noise(noise)))
        })
        .collect();
    let logs = cases
        .par_iter()
        .map(|(_, _, sc)| sim::run(sc).map_err(Failure::from))
        .collect::<Outcome<Vec<_>>>()?;
    mkdir(&c.out)?;
    let mut table = String::from("method,noise,min_h,collided\n");
    for ((m, noise, sc), log) in cases.iter().zip(&logs) {
        let metrics = write_run(&c.out.join(format!("{}_{noise}", m.as_str())), sc, log, c.plots)?;
        let _ = writeln!(table, "{},{noise},{},{}", m.as_str(), fmt_opt(metrics.min_h), metrics.collided);
    }
    write(&c.out.join("compare.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_batch(c: &Common, n: u64) -> Outcome<()> {
    if n == 0 {
        return Err(Failure::Invalid("invalid configuration `seeds`: must be at least 1".into()));
    }
    let base = load(c)?;
    let seeds: Vec<u64> = (1..=n).collect();
    let metrics = sim::batch_run(&base, &seeds)?;
    mkdir(&c.out)?;
    let mut table = String::from("seed,min_h,collided,goal_reach_step,coverage_lag1\n");
    for m in &metrics {
        let dir = c.out.join(format!("seed_{}", m.seed));
        mkdir(&dir)?;
        write(&dir.join("metrics.json"), &m.to_json())?;
        let _ = writeln!(
            table,
            "{},{},{},{},{}",
            m.seed,
            fmt_opt(m.min_h),
            m.collided,
            fmt_opt(m.goal_reach_step),
            fmt_opt(m.coverage.get(&1))
        );
    }
    let agg = aggregate(&metrics);
    write(&c.out.join("batch.csv"), &table)?;
    write(&c.out.join("aggregate.json"), &agg)?;
    print!("{table}{agg}");
    Ok(())
}

/// Worst case over seeds: the smallest `min_h` and the latest goal step
/// (null if any seed never reached its goals).
fn aggregate(metrics: &[Metrics]) -> String {
    let min_h = metrics.iter().filter_map(|m| m.min_h).reduce(f64::min);
    let goals: Option<Vec<usize>> = metrics.iter().map(|m| m.goal_reach_step).collect();
    let value = serde_json::json!({
        "runs": metrics.len(),
        "min_h": min_h,
        "collided_runs": metrics.iter().filter(|m| m.collided).count(),
        "worst_goal_reach_step": goals.and_then(|g| g.into_iter().max()),
    });
    serde_json::to_string_pretty(&value).expect("aggregate serializes") + "\n"
}
