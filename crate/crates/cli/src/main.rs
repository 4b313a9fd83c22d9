use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use urllc_core::driver::{self, Budget, DriverControls, SchemeId, SchemeKind};
use urllc_core::experiment::{self, ExperimentConfig, PointResult, RunOptions};
use urllc_core::{channel, selftest, Scenario};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "urllc", version, about = "Grouping and reflection design experiments for short-packet downlink")]
struct Cli {
    /// Worker threads for Monte-Carlo trials (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the seed of the configuration or instance.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Emit SCA iteration traces as JSON lines on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep point of a configuration and write the result files.
    Run {
        config: PathBuf,
        /// Output directory, replacing `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and check a configuration without running it.
    Validate { config: PathBuf },
    /// Run the reference-oracle checks.
    Selftest,
    /// Solve a single realization and print the result as JSON.
    Solve {
        #[arg(long)]
        instance: PathBuf,
    },
}

/// A single solve request.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Instance {
    scenario: Scenario,
    #[serde(default)]
    trial: u64,
    #[serde(default = "default_scheme")]
    scheme: SchemeId,
    #[serde(default)]
    controls: DriverControls,
}

fn default_scheme() -> SchemeId {
    SchemeId::new(SchemeKind::ProposedGreedy, true)
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    let outcome = match &cli.command {
        Command::Run { config, out } => run(&cli, config, out.clone()),
        Command::Validate { config } => validate(&cli, config),
        Command::Selftest => run_selftest(),
        Command::Solve { instance } => solve(&cli, instance),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load(cli: &Cli, path: &Path) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn validate(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let cfg = load(cli, path)?;
    let points = cfg.points();
    println!(
        "{}: ok ({} sweep points, {} schemes, {} trials each)",
        path.display(),
        points.len(),
        cfg.schemes.len(),
        cfg.trials
    );
    Ok(())
}

fn emit_traces(point: &PointResult) {
    for r in &point.records {
        let Some(res) = &r.result else { continue };
        for entry in &res.beamform.trace {
            let line = json!({
                "sweep_param": point.parameter.name(),
                "sweep_value": point.value,
                "scheme": r.scheme,
                "trial": r.trial_index,
                "iteration": entry.iteration,
                "gamma": entry.gamma,
                "accepted": entry.accepted,
                "relaxed_objective": entry.relaxed_objective,
                "refined_objective": entry.refined_objective,
                "solver_status": entry.solver_status,
            });
            eprintln!("{line}");
        }
    }
}

fn run(cli: &Cli, path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = load(cli, path)?;
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    let options = RunOptions {
        keep_results: cli.verbose,
    };
    let verbose = cli.verbose;
    let points = experiment::run_points(&cfg, options, |p| {
        if verbose {
            emit_traces(p);
        }
        for r in p.records.iter().filter(|r| r.failed()) {
            eprintln!(
                "warning: {}={} {} trial {} failed: {}",
                p.parameter.name(),
                p.value,
                r.scheme,
                r.trial_index,
                r.error.as_deref().unwrap_or("")
            );
        }
        let summary: Vec<String> = p.aggregates.iter().map(|a| format!("{} {:.1}", a.scheme, a.mean)).collect();
        eprintln!("{}={}: {}", p.parameter.name(), p.value, summary.join(", "));
    })
    .map_err(|e| match e {
        experiment::RunError::Config(c) => Failure::Config(c.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    let files = experiment::write_outputs(&cfg, &points).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{}", files.trials.display());
    println!("{}", files.aggregate.display());
    println!("{}", files.manifest.display());
    Ok(())
}

fn run_selftest() -> Result<(), Failure> {
    let checks = selftest::run_all();
    let mut failed = 0;
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {:<32} {} ({:.2} s)", c.name, c.detail, c.seconds);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} checks failed", checks.len())));
    }
    Ok(())
}

fn solve(cli: &Cli, path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let mut inst: Instance =
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        inst.scenario.seed = seed;
    }
    inst.scenario.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let real = channel::generate_realization(&inst.scenario, inst.trial).map_err(|e| Failure::Config(e.to_string()))?;
    let mut controls = inst.controls;
    controls.sca.seed = driver::randomization_seed(inst.scenario.seed, inst.trial);
    let result = driver::alternating_optimize(&real, inst.scheme, &Budget::from(&inst.scenario), &controls)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    if cli.verbose {
        for entry in &result.beamform.trace {
            eprintln!("{}", serde_json::to_string(entry).expect("trace serializes"));
        }
    }
    println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
    Ok(())
}
