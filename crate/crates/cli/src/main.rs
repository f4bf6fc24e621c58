//! `eqcl`: generate benchmark data, train the continual learner, check the
//! numeric property suites, and inspect run metrics.
//!
//! Exit codes: 0 success, 1 failed property check, 2 configuration error,
//! 3 numeric failure during training, 4 I/O failure.

mod config;
mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eqcl_core::dataio::{save_dataset, DataError, DatasetSpec, CATALOG};
use eqcl_core::protocol::ForgettingVariant;
use eqcl_core::verify::{full_suite, Corruption};

#[derive(Debug)]
pub enum CliError {
    /// A property suite failed (exit 1).
    Property(String),
    /// Bad flags or configuration (exit 2).
    Config(String),
    /// Training reached a non-finite loss (exit 3).
    Numeric(String),
    /// Filesystem failure (exit 4).
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Property(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Property(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(err: DataError) -> Self {
        match err {
            DataError::Io { .. } => CliError::Io(err.to_string()),
            _ => CliError::Config(err.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "eqcl", version, about = "Pose-agnostic class-incremental learning on point clouds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset on disk.
    GenData(GenDataArgs),
    /// Run the continual-learning protocol and write a run directory.
    Train(TrainArgs),
    /// Run the equivariance, gradient, and oracle property suites.
    Verify(VerifyArgs),
    /// Print headline metrics from a finished run directory.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Class count (leading entries of the catalog) or comma-separated names.
    #[arg(long, default_value = "8")]
    classes: String,
    /// Samples per class across both splits.
    #[arg(long, default_value_t = 125)]
    per_class: usize,
    /// Points per cloud.
    #[arg(long, default_value_t = 256)]
    points: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for the manifest and sample files.
    #[arg(long, default_value = "dataset")]
    out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration; every field is optional and defaulted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set memory.M=0 --set scenario=PA/PA.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory to create.
    #[arg(long, default_value = "eqcl-run")]
    out: PathBuf,
    /// Suppress progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Trials per randomized property.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: corrupt one layer so its suite must fail
    /// (vn-linear, vn-nonlinear, vn-maxpool, trunk).
    #[arg(long)]
    corrupt: Option<String>,
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Run directory containing summary.json.
    #[arg(long)]
    run: PathBuf,
    /// Forgetting-rate variant to recompute.
    #[arg(long, value_enum, default_value_t = ForgettingFlag::FirstTask)]
    forgetting: ForgettingFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForgettingFlag {
    FirstTask,
    MaxSeen,
}

impl From<ForgettingFlag> for ForgettingVariant {
    fn from(f: ForgettingFlag) -> Self {
        match f {
            ForgettingFlag::FirstTask => ForgettingVariant::FirstTask,
            ForgettingFlag::MaxSeen => ForgettingVariant::MaxSeen,
        }
    }
}

fn main() {
    // Rust masks SIGPIPE at startup; restore the default disposition so
    // piping into `head` terminates the process instead of panicking.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => train::cmd_train(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Metrics(args) => train::cmd_metrics(args),
    };
    if let Err(err) = result {
        eprintln!("{err}");
        std::process::exit(err.code());
    }
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let classes = parse_classes(&args.classes)?;
    let refs: Vec<&str> = classes.iter().map(String::as_str).collect();
    let spec = DatasetSpec::synthetic(&refs, args.per_class, args.points, args.seed);
    let dataset = save_dataset(&args.out, &spec)?;
    println!(
        "{} classes, {} samples ({} train / {} test), {} points each -> {}",
        dataset.classes.len(),
        dataset.train.len() + dataset.test.len(),
        dataset.train.len(),
        dataset.test.len(),
        args.points,
        args.out.display()
    );
    Ok(())
}

fn parse_classes(spec: &str) -> Result<Vec<String>, CliError> {
    let spec = spec.trim();
    if let Ok(n) = spec.parse::<usize>() {
        if n == 0 || n > CATALOG.len() {
            return Err(CliError::Config(format!(
                "--classes: count must be in 1..={}, got {n}",
                CATALOG.len()
            )));
        }
        return Ok(CATALOG[..n].iter().map(|c| c.name().to_string()).collect());
    }
    Ok(spec.split(',').map(|s| s.trim().to_string()).collect())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let corrupt = match &args.corrupt {
        None => Corruption::None,
        Some(name) => Corruption::parse(name).ok_or_else(|| {
            CliError::Config(format!(
                "--corrupt: unknown layer '{name}' (vn-linear, vn-nonlinear, vn-maxpool, trunk)"
            ))
        })?,
    };
    if args.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let reports = full_suite(args.trials, args.seed, corrupt);
    for r in &reports {
        println!("{}", r.line());
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("all {} properties hold", reports.len());
        Ok(())
    } else {
        let worst = failed
            .iter()
            .max_by(|a, b| (a.worst / a.threshold).total_cmp(&(b.worst / b.threshold)))
            .expect("nonempty");
        Err(CliError::Property(format!(
            "{} of {} properties failed; worst: {}",
            failed.len(),
            reports.len(),
            worst.line()
        )))
    }
}
