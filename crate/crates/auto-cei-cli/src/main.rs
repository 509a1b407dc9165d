//! Command-line front end for the curriculum pipeline.
//!
//! Subcommands: `gen-data` writes task splits, `run` executes a configured
//! run, `eval` scores a policy snapshot, `report` re-renders a run's report
//! files, and `resume` continues or re-scores an existing run.
//!
//! Exit status is 0 on success, 1 on configuration errors (bad flags, bad
//! config file, failed validation), and 2 on runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use auto_cei::config::{parse_depths, BackendConfig, RunConfig, RunMode};
use auto_cei::policy::{RemoteOptions, SimPolicyParams};
use auto_cei::run::{self, RunReport};
use auto_cei::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Set once stdout's consumer has closed the pipe (`auto-cei ... | head`);
/// later output is dropped but the command still completes its work.
static STDOUT_GONE: AtomicBool = AtomicBool::new(false);

/// Writes one line to stdout, treating a broken pipe as "stop printing"
/// rather than a failure; any other write error is fatal.
fn emit(line: std::fmt::Arguments) {
    use std::io::Write;
    if STDOUT_GONE.load(Ordering::Relaxed) {
        return;
    }
    let mut stdout = std::io::stdout().lock();
    let result = stdout.write_fmt(line).and_then(|()| stdout.write_all(b"\n"));
    if let Err(e) = result {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            STDOUT_GONE.store(true, Ordering::Relaxed);
            return;
        }
        eprintln!("cannot write to stdout: {e}");
        std::process::exit(i32::from(EXIT_RUNTIME));
    }
}

macro_rules! out {
    ($($arg:tt)*) => { emit(format_args!($($arg)*)) };
}

#[derive(Parser)]
#[command(
    name = "auto-cei",
    version,
    about = "Curriculum expert iteration over refusal-aware reasoning policies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test task files from the built-in generator
    GenData {
        /// Train, validation, and test sizes, comma-separated
        #[arg(long, default_value = "500,200,200", value_parser = parse_sizes)]
        sizes: Sizes,
        /// Inclusive range of oracle solution lengths, e.g. "1..8" or "3"
        #[arg(long, default_value = "1..8")]
        depths: String,
        /// Master seed for task generation
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Directory receiving train.jsonl, val.jsonl, and test.jsonl
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Execute a configured run into a fresh run directory
    Run {
        /// Path to the TOML run configuration
        #[arg(long)]
        config: PathBuf,
        /// Override the refusal weight of the objective
        #[arg(long)]
        lambda: Option<f64>,
        /// Override the master seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the run mode
        #[arg(long, value_parser = parse_mode)]
        mode: Option<RunMode>,
        /// Override the policy backend: "simulated" or "remote:<model>"
        #[arg(long, value_parser = parse_backend)]
        backend: Option<BackendOverride>,
        /// Override the run directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the sampling parallelism width
        #[arg(long)]
        parallelism: Option<usize>,
    },
    /// Score a saved policy snapshot against a task file
    Eval {
        /// Path to a policy snapshot JSON file
        #[arg(long)]
        policy: PathBuf,
        /// Path to a task JSONL file
        #[arg(long)]
        data: PathBuf,
        /// Samples drawn per task
        #[arg(long, default_value_t = 16)]
        draws: usize,
        /// Sampling seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Refusal weight for the reported objective
        #[arg(long, default_value_t = 0.2)]
        lambda: f64,
        /// Sampling parallelism width
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
    },
    /// Re-render report.json, curves.csv, and summary.md for a run
    Report {
        /// Path to an existing run directory
        #[arg(long)]
        run: PathBuf,
    },
    /// Continue an interrupted run, or re-score a finished one under a new
    /// refusal weight without relaunching expert iteration
    Resume {
        /// Path to an existing run directory
        #[arg(long)]
        run: PathBuf,
        /// New refusal weight; defaults to the run's stored value
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Clone, Debug)]
struct Sizes([usize; 3]);

fn parse_sizes(s: &str) -> Result<Sizes, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated sizes, got {s:?}"));
    }
    let mut sizes = [0usize; 3];
    for (slot, part) in sizes.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| format!("invalid size {part:?} in {s:?}"))?;
    }
    Ok(Sizes(sizes))
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    match s {
        "auto_cei" => Ok(RunMode::AutoCei),
        "vanilla_ei" => Ok(RunMode::VanillaEi),
        "r_tuning" => Ok(RunMode::RTuning),
        "no_curriculum" => Ok(RunMode::NoCurriculum),
        other => Err(format!(
            "unknown mode {other:?}; expected auto_cei, vanilla_ei, r_tuning, or no_curriculum"
        )),
    }
}

#[derive(Clone, Debug)]
enum BackendOverride {
    Simulated,
    Remote(String),
}

fn parse_backend(s: &str) -> Result<BackendOverride, String> {
    if s == "simulated" {
        return Ok(BackendOverride::Simulated);
    }
    match s.split_once(':') {
        Some(("remote", model)) if !model.is_empty() => {
            Ok(BackendOverride::Remote(model.to_string()))
        }
        _ => Err(format!("unknown backend {s:?}; expected \"simulated\" or \"remote:<model>\"")),
    }
}

impl BackendOverride {
    /// The simulated override uses the reference base dynamics; the remote
    /// override reads connection details from CEI_API_BASE / CEI_API_KEY.
    fn into_config(self) -> BackendConfig {
        match self {
            BackendOverride::Simulated => {
                BackendConfig::Simulated(SimPolicyParams::new(0.25, 0.05, 3.0, 0.3))
            }
            BackendOverride::Remote(model) => {
                BackendConfig::Remote(RemoteOptions { model, ..RemoteOptions::default() })
            }
        }
    }
}

/// A command failure, split by which exit status it maps to.
enum Failure {
    Config(String),
    Runtime(String),
}

/// Bad inputs exit 1; everything that breaks mid-flight exits 2.
fn classify(err: Error) -> Failure {
    match err {
        Error::InvalidConfig(_)
        | Error::OutOfRange { .. }
        | Error::ResumeMismatch(_)
        | Error::RemoteConfig(_)
        | Error::Toml(_) => Failure::Config(err.to_string()),
        other => Failure::Runtime(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_CONFIG,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(message)) => {
            eprintln!("configuration error: {message}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(message)) => {
            eprintln!("run failed: {message}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { sizes, depths, seed, out } => gen_data(sizes, &depths, seed, &out),
        Command::Run { config, lambda, seed, mode, backend, out, parallelism } => {
            let mut config =
                RunConfig::load(&config).map_err(|e| Failure::Config(e.to_string()))?;
            if let Some(lambda) = lambda {
                config.lambda = lambda;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(mode) = mode {
                config.mode = mode;
            }
            if let Some(backend) = backend {
                config.backend = backend.into_config();
            }
            if let Some(out) = out {
                config.out = out;
            }
            if let Some(width) = parallelism {
                config.parallelism = width;
            }
            let summary = run::run(&config).map_err(classify)?;
            print_report(&summary.run_dir, &summary.report);
            Ok(())
        }
        Command::Eval { policy, data, draws, seed, lambda, parallelism } => {
            let summary = run::evaluate_snapshot(&policy, &data, draws, seed, lambda, parallelism)
                .map_err(classify)?;
            let json = serde_json::to_string_pretty(&summary)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            out!("{json}");
            Ok(())
        }
        Command::Report { run: run_dir } => {
            let report = run::emit_reports(&run_dir).map_err(classify)?;
            print_report(&run_dir, &report);
            Ok(())
        }
        Command::Resume { run: run_dir, lambda } => {
            let summary = run::resume(&run_dir, lambda).map_err(classify)?;
            out!("new launches: {}", summary.new_launches);
            print_report(&summary.run_dir, &summary.report);
            Ok(())
        }
    }
}

fn gen_data(sizes: Sizes, depths: &str, seed: u64, out: &Path) -> Result<(), Failure> {
    let range = parse_depths(depths).map_err(Failure::Config)?;
    let (train, val, test) = run::generate_splits(sizes.0, range, seed).map_err(classify)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.to_string()))?;
    for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = out.join(format!("{name}.jsonl"));
        set.write_jsonl(&path).map_err(classify)?;
        out!("wrote {} ({} tasks)", path.display(), set.len());
    }
    Ok(())
}

fn print_report(run_dir: &Path, report: &RunReport) {
    out!("run directory: {}", run_dir.display());
    out!(
        "mode {}  seed {}  lambda {}  launches {}",
        report.mode.as_str(),
        report.seed,
        report.lambda,
        report.launches
    );
    if let Some(best) = &report.best {
        out!(
            "best c1 {:.4}  val f {:.6}  (acc {:.4} pre {:.4} idk {:.4})",
            best.c1,
            best.f,
            best.acc,
            best.pre,
            best.idk
        );
    }
    let t = &report.test;
    out!("test: n {}  acc {:.4}  pre {:.4}  idk {:.4}  f {:.6}", t.n, t.acc, t.pre, t.idk, t.f);
    out!("final policy: {}", report.final_policy);
}
