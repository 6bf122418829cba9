use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcaplab::lab::{self, BodySpec, ExperimentConfig, Scenario, EXIT_USAGE};
use pcaplab::Error;

/// Exterior p-capacity laboratory: solves capacitary potentials of convex
/// bodies and checks capacity, concavity and Brunn-Minkowski properties.
///
/// Exit status: 0 PASS, 1 FAIL, 2 INCONCLUSIVE, 3 usage or configuration error.
#[derive(Debug, Parser)]
#[command(name = "pcaplab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the scenario named in the config (or by --scenario).
    Run(RunArgs),
    /// Solve the exterior problem for each body.
    Solve(CommonArgs),
    /// Capacity estimates and the level-set scaling law.
    Capacity(CommonArgs),
    /// Power-concavity estimates of the potential.
    Concavity(CommonArgs),
    /// Brunn-Minkowski deficit of two bodies over a lambda sweep.
    Bm(CommonArgs),
    /// Level-set extraction and pairwise homothety fits.
    Levelsets(CommonArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Scenario: ball, theorem1, theorem2, bm, solve, capacity, concavity, levelsets.
    #[arg(long)]
    scenario: Option<String>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON experiment configuration; defaults apply when omitted.
    config: Option<PathBuf>,
    /// Comma-separated body names (disk, ball, square, ellipse, ellipse:RATIO).
    #[arg(long, value_delimiter = ',')]
    bodies: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, default_value = "pcaplab-out")]
    out: PathBuf,
    /// Worker threads for per-body and per-lambda sub-runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Seed of the randomized midpoint test.
    #[arg(long)]
    seed: Option<u64>,
    /// Cells per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Also write SVG plots.
    #[arg(long)]
    plots: bool,
    /// Dimension when no config is given.
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Exponent p when no config is given.
    #[arg(long, default_value_t = 1.5)]
    p: f64,
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("pcaplab: {msg}");
    ExitCode::from(EXIT_USAGE as u8)
}

fn build_config(scenario: Option<Scenario>, args: &CommonArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::with_defaults(args.n, args.p, scenario.unwrap_or(Scenario::Ball)),
    };
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    if let Some(names) = &args.bodies {
        cfg.bodies = names.iter().map(|s| BodySpec::Named(s.trim().to_string())).collect();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(cells) = args.grid {
        cfg.grid.cells = Some(cells);
    }
    cfg.validate().map_err(|(key, msg)| Error::Config(format!("command line ({key}): {msg}")))?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let (scenario, args) = match &cli.command {
        Command::Run(r) => match r.scenario.as_deref().map(Scenario::parse).transpose() {
            Ok(s) => (s, &r.common),
            Err(e) => return usage_error(e),
        },
        Command::Solve(a) => (Some(Scenario::Solve), a),
        Command::Capacity(a) => (Some(Scenario::Capacity), a),
        Command::Concavity(a) => (Some(Scenario::Concavity), a),
        Command::Bm(a) => (Some(Scenario::Bm), a),
        Command::Levelsets(a) => (Some(Scenario::Levelsets), a),
    };
    if args.workers == 0 {
        return usage_error("--workers must be at least 1");
    }
    let cfg = match build_config(scenario, args) {
        Ok(c) => c,
        Err(e) => return usage_error(e),
    };
    let outcome = match lab::run_with_workers(&cfg, args.workers) {
        Ok(o) => o,
        Err(e) => return usage_error(e),
    };
    let written = match outcome.write(&args.out, args.plots) {
        Ok(w) => w,
        Err(e) => return usage_error(format!("cannot write artifacts to {}: {e}", args.out.display())),
    };
    let verdict = outcome.report.verdict;
    println!("{}: {}", outcome.report.scenario, verdict.as_str());
    for path in written {
        println!("  {}", path.display());
    }
    ExitCode::from(verdict.exit_code() as u8)
}
