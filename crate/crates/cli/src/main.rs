//! `cel`: composite empirical likelihood from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 numerical failure. Every failure prints one JSON line to stderr.

mod commands;
mod studies;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use cel::inference::Method;
use cel::simgen::Distribution;
use cel::CelError;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "cel", version, about = "Composite empirical likelihood estimation and inference")]
struct Cli {
    /// Worker threads (defaults to the hardware parallelism).
    #[arg(long, global = true, env = "CEL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Maximise the composite likelihood and report the sandwich covariance.
    Fit(FitArgs),
    /// Likelihood-ratio test of named parameters, profiling out the rest.
    Test(TestArgs),
    /// Likelihood-ratio confidence intervals.
    Ci(CiArgs),
    /// Coverage study of the common-mean estimator.
    Simulate(StudyArgs),
    /// Comparison of composite, pooled and joint likelihoods.
    Compare(CompareArgs),
    /// Fit-time benchmark across component splits.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct Inputs {
    /// Numeric CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// JSON model description.
    #[arg(long)]
    model: PathBuf,
    /// Write the JSON result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Iteration cap of the outer optimiser.
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Args, Debug)]
struct Calibration {
    /// Reference law: eigen, welch or chisq.
    #[arg(long, default_value = "welch")]
    method: Method,
    /// Assert the components are independent (required by chisq).
    #[arg(long)]
    assume_independent: bool,
    /// Estimate the matrices at the restricted nuisance estimate.
    #[arg(long)]
    strict_nuisance: bool,
}

#[derive(Args, Debug)]
struct TestArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Null values, e.g. `mu=1,sigma2=2`.
    #[arg(long)]
    null: String,
    #[command(flatten)]
    calibration: Calibration,
}

#[derive(Args, Debug)]
struct CiArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Parameter to bound; repeat for several.
    #[arg(long = "param", required = true)]
    params: Vec<String>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[command(flatten)]
    calibration: Calibration,
}

#[derive(Args, Debug)]
struct Grid {
    /// Base seed; every table is a function of it.
    #[arg(long)]
    seed: u64,
    #[arg(long = "rho", value_delimiter = ',', default_values_t = [0.0, 0.5, 0.9])]
    rhos: Vec<f64>,
    #[arg(long = "n", value_delimiter = ',', default_values_t = [10, 25, 50, 100])]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Directory for tables and manifests.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// Designs: normal, chisq, uniform.
    #[arg(long = "dist", value_delimiter = ',', default_values = ["normal", "chisq", "uniform"])]
    dists: Vec<Distribution>,
    #[command(flatten)]
    grid: Grid,
    #[arg(long = "alpha", value_delimiter = ',', default_values_t = [0.10, 0.05, 0.01])]
    alphas: Vec<f64>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CompareStudy {
    Means,
    Variance,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long, value_enum, default_value = "means")]
    study: CompareStudy,
    /// Designs; `ar1` for the variance study, bivariate designs otherwise.
    #[arg(long = "dist", value_delimiter = ',')]
    dists: Vec<Distribution>,
    #[command(flatten)]
    grid: Grid,
    #[arg(long = "alpha", value_delimiter = ',', default_values_t = [0.05])]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    /// Reference law for the composite test and interval.
    #[arg(long, default_value = "welch")]
    method: Method,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long = "n", value_delimiter = ',', default_values_t = [2000])]
    ns: Vec<usize>,
    #[arg(long = "J", value_delimiter = ',', default_values_t = [1, 2, 4])]
    js: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
}

/// A failed command: exit code, error record, and optional partial output.
#[derive(Debug)]
pub(crate) struct Failure {
    code: u8,
    record: Value,
    partial: Option<Value>,
}

impl Failure {
    pub(crate) fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            record: json!({"kind": "usage", "message": message.into()}),
            partial: None,
        }
    }

    /// A numerical failure with whatever diagnostics were gathered.
    pub(crate) fn numerical(message: impl Into<String>, partial: Value) -> Self {
        Failure {
            code: 3,
            record: json!({"kind": "numeric", "message": message.into()}),
            partial: Some(partial),
        }
    }
}

impl From<CelError> for Failure {
    fn from(e: CelError) -> Self {
        let mut record = json!({"kind": e.kind(), "message": e.to_string()});
        match &e {
            CelError::Parse { line, column, .. } => {
                record["line"] = json!(line);
                record["column"] = json!(column);
            }
            CelError::Evaluation { component, .. } => record["component"] = json!(component),
            _ => {}
        }
        Failure {
            code: if e.is_numerical() { 3 } else { 2 },
            record,
            partial: None,
        }
    }
}

pub(crate) type Outcome = Result<Value, Failure>;

fn emit(value: &Value, out: Option<&PathBuf>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("json serialises") + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Failure::from(CelError::from(e))),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn report(failure: &Failure) {
    let mut record = failure.record.clone();
    record["exit_code"] = json!(failure.code);
    eprintln!("{}", json!({ "error": record }));
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = match cli.threads {
        Some(0) => return Err(Failure::usage("--threads must be at least 1")),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::from(CelError::Numeric(format!("cannot start worker pool: {e}"))))?;
    let (result, out) = pool.install(|| match &cli.command {
        Command::Fit(a) => (commands::fit(&a.inputs, threads), a.inputs.out.clone()),
        Command::Test(a) => (commands::test(a, threads), a.inputs.out.clone()),
        Command::Ci(a) => (commands::ci(a, threads), a.inputs.out.clone()),
        Command::Simulate(a) => (studies::simulate(a, threads), None),
        Command::Compare(a) => (studies::compare(a, threads), None),
        Command::Bench(a) => (studies::bench(a, threads), None),
    });
    match result {
        Ok(value) => emit(&value, out.as_ref()),
        Err(failure) => {
            if let Some(partial) = &failure.partial {
                emit(partial, out.as_ref())?;
            }
            Err(failure)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let text = e.to_string();
            let head = text.split("\n\nUsage:").next().unwrap_or_default();
            let message = head.split_whitespace().collect::<Vec<_>>().join(" ");
            report(&Failure::usage(message.trim_start_matches("error: ")));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            report(&failure);
            ExitCode::from(failure.code)
        }
    }
}
