//! Command-line front end for closed-loop safety-filter studies.
//!
//! Exit codes: 0 on success, 2 when a run terminates because the filter
//! could not certify a safe input, 1 on configuration or I/O errors.
//! Log verbosity follows the `RUST_LOG` environment variable.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bcbf::scenario::{ConstraintSpec, Scenario};
use bcbf::sim::{bound_report, monte_carlo, ControllerKind, SimRecord};
use bcbf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bcbf",
    version,
    about = "Risk-aware safety filtering for systems under state uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one closed-loop run and write its CSV and metrics.
    Run(RunArgs),
    /// Run a Monte Carlo study and write aggregate metrics.
    Montecarlo(MonteCarloArgs),
    /// Print the jump-risk natural bound and margin table of the noise-free
    /// nominal run.
    Bound(BoundArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's jump-risk budget epsilon (0, 0.5].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override every constraint's risk level delta (0, 0.5].
    #[arg(long)]
    delta: Option<f64>,
    /// Override the scenario's control step (seconds).
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Controller closing the loop.
    #[arg(long, value_enum)]
    controller: ControllerArg,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Controller closing the loop.
    #[arg(long, value_enum, default_value_t = ControllerArg::Bcbf)]
    controller: ControllerArg,
    /// Number of runs (seeds `seed..seed+runs`).
    #[arg(long)]
    runs: usize,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Base RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Skip writing one CSV per run.
    #[arg(long, default_value_t = false)]
    no_csv: bool,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ControllerArg {
    Bcbf,
    StateCbf,
    LqrOnly,
}

impl From<ControllerArg> for ControllerKind {
    fn from(a: ControllerArg) -> Self {
        match a {
            ControllerArg::Bcbf => ControllerKind::Bcbf,
            ControllerArg::StateCbf => ControllerKind::StateCbf,
            ControllerArg::LqrOnly => ControllerKind::LqrOnly,
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    // Parse by hand so usage errors exit 1; clap's default usage exit code
    // (2) is reserved here for runs the filter could not certify.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(infeasible) => {
            if infeasible {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether any run terminated as infeasible.
fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let scenario = load_scenario(&args.common)?;
            let kind: ControllerKind = args.controller.into();
            std::fs::create_dir_all(&args.out)?;
            let stem = format!("{}_{}_{}", scenario.name, kind, args.seed);
            let csv_path = args.out.join(format!("{stem}.csv"));
            // One-run Monte Carlo so the trajectory is simulated exactly once
            // and still aggregated into the standard metrics report.
            let mut stop_note: Option<String> = None;
            let mut sink = |_i: usize, record: &SimRecord| -> Result<()> {
                if let Some(stop) = &record.infeasible {
                    stop_note = Some(format!(
                        "run terminated infeasible at t = {:.3}: {}",
                        stop.t, stop.message
                    ));
                }
                write_record_csv(record, &csv_path)
            };
            let report = monte_carlo(&scenario, kind, 1, 1, args.seed, Some(&mut sink))?;
            let metrics_path = args.out.join(format!("{stem}_metrics.json"));
            write_json(&report, &metrics_path)?;
            write_json(&report.timing, &args.out.join(format!("{stem}_timing.json")))?;
            println!("wrote {}", csv_path.display());
            println!("wrote {}", metrics_path.display());
            if let Some(note) = stop_note {
                eprintln!("{note}");
                return Ok(true);
            }
            Ok(false)
        }
        Command::Montecarlo(args) => {
            let scenario = load_scenario(&args.common)?;
            let kind: ControllerKind = args.controller.into();
            std::fs::create_dir_all(&args.out)?;
            let out = args.out.clone();
            let name = scenario.name.clone();
            let mut write_csv_sink = |i: usize, record: &SimRecord| -> Result<()> {
                let path = out.join(format!("{name}_{kind}_run{i:04}.csv"));
                write_record_csv(record, &path)
            };
            let sink: Option<&mut dyn FnMut(usize, &SimRecord) -> Result<()>> = if args.no_csv {
                None
            } else {
                Some(&mut write_csv_sink)
            };
            let report = monte_carlo(&scenario, kind, args.runs, args.workers, args.seed, sink)?;
            let stem = format!("{}_{}_metrics.json", scenario.name, kind);
            let metrics_path = args.out.join(&stem);
            write_json(&report, &metrics_path)?;
            write_json(
                &report.timing,
                &args.out.join(format!("{}_{}_timing.json", scenario.name, kind)),
            )?;
            println!("wrote {}", metrics_path.display());
            println!(
                "runs: {}  collisions: {}  belief-unsafe steps: {} ({:.4}%)  infeasible: {}",
                report.runs,
                report.collision_runs,
                report.belief_unsafe_steps,
                100.0 * report.belief_unsafe_fraction,
                report.infeasible_runs
            );
            Ok(report.infeasible_runs > 0)
        }
        Command::Bound(args) => {
            let scenario = load_scenario(&args.common)?;
            let rows = bound_report(&scenario)?;
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            let mut print = || -> std::io::Result<()> {
                writeln!(
                    w,
                    "{:>10}  {:<16}  {:>14}  {:>14}",
                    "t", "constraint", "natural_bound", "gamma"
                )?;
                for row in &rows {
                    writeln!(
                        w,
                        "{:>10.4}  {:<16}  {:>14.8}  {:>14.8}",
                        row.t, row.constraint, row.natural_bound, row.gamma
                    )?;
                }
                Ok(())
            };
            match print() {
                Ok(()) => Ok(false),
                // A closed pipe (e.g. `bcbf bound | head`) is not an error.
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(false),
                Err(e) => Err(Error::from(e)),
            }
        }
    }
}

/// One-run metrics via the Monte Carlo aggregator (runs = 1).
fn load_scenario(common: &CommonArgs) -> Result<Scenario> {
    let mut scenario = Scenario::from_path(&common.scenario)?;
    if let Some(epsilon) = common.epsilon {
        scenario.epsilon = epsilon;
    }
    if let Some(dt) = common.dt {
        scenario.dt = dt;
    }
    if let Some(delta) = common.delta {
        for c in &mut scenario.constraints {
            match c {
                ConstraintSpec::HalfSpace { delta: d, .. } => *d = delta,
                ConstraintSpec::Obstacle { delta: d, .. } => *d = delta,
            }
        }
    }
    scenario.validate()?;
    Ok(scenario)
}

fn write_record_csv(record: &SimRecord, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    record
        .write_csv(std::io::BufWriter::new(file))
        .map_err(Error::from)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
