mod commands;
mod error;
mod meta;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sdid_core::{Method, SeMethod};
use serde::Serialize;

/// Synthetic difference-in-differences estimation, inference and simulation.
#[derive(Debug, Parser)]
#[command(name = "sdid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Point estimate, optionally with a standard error and confidence interval.
    Estimate(EstimateArgs),
    /// Unit and time weights as JSON.
    Weights(WeightsArgs),
    /// Per-control adjusted outcomes and weights as CSV.
    Influence(WeightsArgs),
    /// Trend and influence series for plotting.
    Plotdata(PlotdataArgs),
    /// Fit a simulation spec to a panel.
    Calibrate(CalibrateArgs),
    /// Run a Monte Carlo study from a spec.
    Simulate(SimulateArgs),
    /// Summarize simulation results as CSV.
    Report(ReportArgs),
    /// Calibrate, simulate and report from a single config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Long-format CSV with columns unit,time,outcome,treated (or a unit-by-time matrix with --wide).
    pub input: PathBuf,
    /// Read INPUT as a wide matrix: header `unit,<time...>`, one row per unit.
    #[arg(long)]
    pub wide: bool,
    /// 0/1 treatment matrix in the same wide layout as INPUT.
    #[arg(long, requires = "wide")]
    pub treatment: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "sdid")]
    pub method: Method,
    #[arg(long)]
    pub se_method: Option<SeMethod>,
    /// Bootstrap or placebo replicates.
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Time-varying covariate columns of the long-format input.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    #[arg(long, short)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct WeightsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "sdid")]
    pub method: Method,
    #[arg(long, short)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlotdataArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = "sdid")]
    pub method: Method,
    /// Directory for trend.csv and influence.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    /// Long-format panel CSV.
    pub input: PathBuf,
    /// 0/1 column whose per-unit maximum drives assignment; uniform when omitted.
    #[arg(long)]
    pub assignment: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Treatment effect added to treated cells in simulations.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, short)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Spec JSON written by `calibrate`.
    pub spec: PathBuf,
    #[arg(long)]
    pub ntr: usize,
    #[arg(long)]
    pub tpost: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "sdid,sc,did,mc")]
    pub estimators: Vec<Method>,
    /// Variance methods whose interval coverage is reported.
    #[arg(long, value_delimiter = ',')]
    pub se_methods: Vec<SeMethod>,
    /// Estimators whose intervals are evaluated.
    #[arg(long, value_delimiter = ',', default_value = "sdid")]
    pub coverage_estimators: Vec<Method>,
    /// Bootstrap or placebo replicates per simulated panel.
    #[arg(long, default_value_t = 200)]
    pub inference_reps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Ignore the calibrated assignment probabilities and treat units uniformly at random.
    #[arg(long)]
    pub random_assignment: bool,
    /// Label used in reports.
    #[arg(long, default_value = "simulation")]
    pub name: String,
    #[arg(long, short)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Results JSON files written by `simulate`.
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long, short)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// Pipeline config JSON.
    pub config: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn configure_threads() -> Result<(), error::CliError> {
    let Ok(v) = std::env::var("SDID_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| error::CliError::Invalid(format!("SDID_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| error::CliError::Invalid(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), error::CliError> {
    configure_threads()?;
    match cli.command {
        Command::Estimate(a) => commands::estimate(&a),
        Command::Weights(a) => commands::weights(&a),
        Command::Influence(a) => commands::influence(&a),
        Command::Plotdata(a) => commands::plotdata(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Report(a) => commands::report(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
