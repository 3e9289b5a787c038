use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flower_core::harness::config::ExperimentConfig;
use flower_core::harness::experiment::{run_experiment, sweep, train_base_states, StateFile, SweepParam};
use flower_core::harness::report::{emit_outputs, fmt6, results_jsonl, write_sweep, ExperimentReport};
use flower_core::harness::selftest::run_selftest;
use flower_core::session::Method;
use flower_core::FlowerError;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_SELFTEST: u8 = 4;

#[derive(Parser)]
#[command(name = "flower", version, about = "Few-shot class-incremental experiments on prototypical networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; overrides `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Restrict to one method; overrides `run.methods`.
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base task only and save one state file per seed.
    TrainBase(Common),
    /// Run the configured methods over the full stream.
    Run(Common),
    /// Run flower and its three ablations.
    Ablate(Common),
    /// Sweep the noise bound.
    SweepB {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Sweep the number of noise trials.
    SweepM {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Evaluate a saved state on the held-out samples of its stream.
    Eval {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks, the in-ball radius law and KL bounds.
    Selftest {
        /// Random nets per gradient check.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, FlowerError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn plan(c: &Common) -> Result<(ExperimentConfig, Vec<Method>, Vec<u64>), FlowerError> {
    let cfg = load_config(c.config.as_deref())?;
    let methods = c.method.map_or_else(|| cfg.run.methods.clone(), |m| vec![m]);
    let seeds = c.seeds.clone().unwrap_or_else(|| cfg.run.seeds.clone());
    Ok((cfg, methods, seeds))
}

fn print_table(report: &ExperimentReport) {
    println!("run {}", report.run_id);
    for s in &report.summaries {
        let cols: Vec<String> = s.session_means.iter().map(|v| fmt6(*v)).collect();
        println!(
            "{:<20} {}  avg {}  gap {}",
            s.method.name(),
            cols.join(" "),
            s.avg.map_or("-".into(), fmt6),
            s.gap.map_or("-".into(), fmt6)
        );
    }
    for f in &report.failures {
        eprintln!("failed: {} seed {}: {}", f.method.name(), f.seed, f.error);
    }
}

fn finish_report(report: &ExperimentReport, out: &Path) -> Result<ExitCode, FlowerError> {
    emit_outputs(report, out)?;
    print_table(report);
    Ok(if report.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_RUNTIME) })
}

fn run_sweep(common: &Common, param: SweepParam, values: &[f64]) -> Result<ExitCode, FlowerError> {
    let (cfg, methods, seeds) = plan(common)?;
    let methods = if common.method.is_some() { methods } else { vec![Method::Flower] };
    let outcome = sweep(&cfg, param, values, &methods, &seeds)?;
    let mut failed = false;
    for (value, report) in &outcome.reports {
        emit_outputs(report, &common.out.join(format!("{}_{value}", param.name())))?;
        failed |= !report.failures.is_empty();
    }
    write_sweep(&outcome.rows, &common.out)?;
    for r in &outcome.rows {
        let f = |v: Option<f64>| v.map_or("-".into(), fmt6);
        println!("{}={} {:<20} first {}  final {}  avg {}", r.parameter, r.value, r.method.name(), f(r.first), f(r.last), f(r.avg));
    }
    Ok(if failed { ExitCode::from(EXIT_RUNTIME) } else { ExitCode::SUCCESS })
}

fn dispatch(cli: Cli) -> Result<ExitCode, FlowerError> {
    match cli.command {
        Command::TrainBase(c) => {
            let (cfg, methods, seeds) = plan(&c)?;
            let method = c.method.unwrap_or(methods[0]);
            std::fs::create_dir_all(&c.out)?;
            let mut failed = false;
            for (seed, outcome) in train_base_states(&cfg, method, &seeds)? {
                match outcome.and_then(|sf| {
                    let path = c.out.join(format!("state_{}_seed{seed}.json", method.name()));
                    sf.save(&path)?;
                    Ok((path, sf.evaluate(&cfg)?))
                }) {
                    Ok((path, r)) => println!("seed {seed}: base accuracy {} -> {}", fmt6(r.accuracy), path.display()),
                    Err(e) => {
                        failed = true;
                        eprintln!("seed {seed}: {e}");
                    }
                }
            }
            Ok(if failed { ExitCode::from(EXIT_RUNTIME) } else { ExitCode::SUCCESS })
        }
        Command::Run(c) => {
            let (cfg, methods, seeds) = plan(&c)?;
            finish_report(&run_experiment(&cfg, &methods, &seeds)?, &c.out)
        }
        Command::Ablate(c) => {
            let (cfg, _, seeds) = plan(&c)?;
            finish_report(&run_experiment(&cfg, &Method::ABLATION, &seeds)?, &c.out)
        }
        Command::SweepB { common, values } => run_sweep(&common, SweepParam::Bound, &values),
        Command::SweepM { common, values } => run_sweep(&common, SweepParam::Trials, &values),
        Command::Eval { state, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let sf = StateFile::load(&state)?;
            let r = sf.evaluate(&cfg)?;
            let line = results_jsonl(std::slice::from_ref(&r))?;
            print!("{line}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("eval.jsonl"), line)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { seeds } => {
            let checks = run_selftest(seeds);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::from(EXIT_SELFTEST) })
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                FlowerError::Config(_) => ExitCode::from(EXIT_CONFIG),
                _ => ExitCode::from(EXIT_RUNTIME),
            }
        }
    }
}
