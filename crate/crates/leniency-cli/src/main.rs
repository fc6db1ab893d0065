//! Command-line front end for examiner-design instrumental-variable
//! analysis: estimation, the design checklist, and synthetic studies.

mod output;
mod run;

use clap::{Args, Parser, Subcommand};
use leniency_iv::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "leniency",
    version,
    about = "Leniency-design IV estimation and diagnostics",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel work (0 = library default). Never
    /// changes numeric results.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the treatment effect with one or more estimators.
    Estimate(EstimateArgs),
    /// Covariate balance against the instrument-driven treatment variation.
    Balance(BalanceArgs),
    /// Monotonicity screen on transformed-outcome bin masses.
    Monotonicity(MonotonicityArgs),
    /// Complier covariate means.
    Compliers(CompliersArgs),
    /// Synthetic-design Monte Carlo studies.
    Simulate(SimulateArgs),
}

/// Columns and input location shared by the analysis commands.
#[derive(Args)]
struct DataArgs {
    /// Input CSV path.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long)]
    outcome: String,
    /// Treatment column.
    #[arg(long)]
    treatment: String,
    /// Examiner (decision-maker) identifier column.
    #[arg(long)]
    examiner: String,
    /// Fixed-effect factors, comma-separated; join columns with ':' to
    /// interact them (e.g. "court:year,offense").
    #[arg(long)]
    fe: String,
    /// Clustered standard errors are not provided; this flag only explains
    /// why.
    #[arg(long, value_name = "COLUMN")]
    cluster: Option<String>,
}

#[derive(Args)]
struct OutputArgs {
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
    format: String,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Estimators to run: a comma-separated list of
    /// ols,2sls,jive,ijive,ujive,b2sls,fejiv, or "all".
    #[arg(long, default_value = "ujive")]
    estimator: String,
    /// Null effect for the weak-instrument score test.
    #[arg(long, value_name = "BETA0", allow_hyphen_values = true)]
    weak_iv_beta0: Option<f64>,
    /// Inversion grid "lo:hi:points" for the weak-instrument confidence
    /// set (e.g. "-2:2:401"). Implies the test.
    #[arg(long, value_name = "LO:HI:N", allow_hyphen_values = true)]
    weak_iv_grid: Option<String>,
    /// Evaluate the endogeneity-correlation diagnostic at this effect.
    #[arg(long, value_name = "BETA", allow_hyphen_values = true)]
    rho_at: Option<f64>,
    /// Evaluate the correlation diagnostic over an effect range "lo:hi".
    #[arg(long, value_name = "LO:HI", allow_hyphen_values = true)]
    rho_range: Option<String>,
    /// Observation cap for the dense leverage-weight solve.
    #[arg(long, value_name = "N")]
    fejiv_cap: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct BalanceArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Covariate columns to test, comma-separated.
    #[arg(long, required = true)]
    covariates: String,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct MonotonicityArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Outcome bins: "auto", "quantiles:K", "distinct:MAX", or
    /// "explicit:lo:hi,lo:hi,...".
    #[arg(long, default_value = "auto")]
    bins: String,
    /// Flag level for significantly negative masses.
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CompliersArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Covariate columns to characterize, comma-separated.
    #[arg(long, required = true)]
    covariates: String,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// key=value generator configuration file; command-line overrides win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override: observations per replication.
    #[arg(long)]
    n: Option<usize>,
    /// Override: generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: criteria-rotation fraction in [0, 0.5).
    #[arg(long)]
    defier_fraction: Option<f64>,
    /// Override: independent covariate columns to generate.
    #[arg(long)]
    covariates: Option<usize>,
    /// Monte Carlo replications (0 with --emit-data to only write data).
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Estimators to study, comma-separated or "all".
    #[arg(long, default_value = "ujive,2sls,ols,jive")]
    estimator: String,
    /// Run the weak-instrument test at this null each replication.
    #[arg(long, value_name = "BETA0", allow_hyphen_values = true)]
    weak_iv_beta0: Option<f64>,
    /// Write one generated dataset to this CSV path.
    #[arg(long, value_name = "PATH")]
    emit_data: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore failure: a pool may already exist in test harnesses.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let result = match cli.command {
        Command::Estimate(args) => run::estimate(args),
        Command::Balance(args) => run::balance(args),
        Command::Monotonicity(args) => run::monotonicity(args),
        Command::Compliers(args) => run::compliers(args),
        Command::Simulate(args) => run::simulate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(if e.is_input_error() { 2 } else { 3 });
    }
}

/// Uniform rejection message for clustering requests.
fn reject_cluster(requested: &Option<String>) -> Result<(), Error> {
    match requested {
        None => Ok(()),
        Some(col) => Err(Error::Unsupported(format!(
            "clustered standard errors are not provided: the robust variance already \
             sums over independent observations, and examiner designs should be \
             clustered at the level at which assignment varies. If cases within \
             '{col}' share an assignment draw, aggregate to that level first."
        ))),
    }
}
