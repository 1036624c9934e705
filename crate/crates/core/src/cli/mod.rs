mod commands;
mod config;
mod io;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

/// Graph KAN classifier for multi-omics data.
#[derive(Debug, Parser)]
#[command(name = "mogkan", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-signal dataset with its interaction table.
    Synth(SynthArgs),
    /// Keep features whose Welch t-test p-value is below a threshold.
    Filter(FilterArgs),
    /// LASSO feature selection.
    Select(SelectArgs),
    /// Inner-join several matrices on sample id.
    Integrate(IntegrateArgs),
    /// Score-threshold and degree-filter an interaction table.
    BuildGraph(BuildGraphArgs),
    /// Train one model on all samples of a run config.
    Train(RunArgs),
    /// Stratified k-fold cross-validation of a run config.
    Cv(RunArgs),
    /// Rank features of a checkpoint by first-layer weight magnitudes.
    Importance(ImportanceArgs),
    /// Render metrics files as a summary table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub samples: usize,
    #[arg(long)]
    pub features: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 10)]
    pub informative: usize,
    /// Edge probability between informative features.
    #[arg(long, default_value_t = 0.3)]
    pub density: f64,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub p_threshold: f64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_iter: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IntegrateArgs {
    /// Matrix CSV; repeat once per source.
    #[arg(long = "matrix", required = true)]
    pub matrices: Vec<PathBuf>,
    /// Feature-id prefix; one per matrix, in the same order.
    #[arg(long = "prefix", required = true)]
    pub prefixes: Vec<String>,
    /// Label CSV; either none or one per matrix.
    #[arg(long = "labels")]
    pub labels: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub interactions: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub min_score: u16,
    #[arg(long, default_value_t = 200)]
    pub min_degree: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// A run config plus overrides; flags win over the file.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `feature_id<TAB>gene_name` table.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `metrics.json` written by `cv`; repeat to compare runs.
    #[arg(long = "metrics", required = true)]
    pub metrics: Vec<PathBuf>,
    /// Row name per metrics file; defaults to the file's directory name.
    #[arg(long = "name")]
    pub names: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A bad flag or config value; reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

/// Parses arguments, runs the command and maps the outcome to an exit code:
/// 0 success, 1 runtime failure, 2 usage or config error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match configure_threads().and_then(|()| run(cli.command)) {
        Ok(()) => 0,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("MOGKAN_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MOGKAN_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| anyhow::anyhow!("thread pool: {e}"))
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(a) => commands::synth(&a),
        Command::Filter(a) => commands::filter(&a),
        Command::Select(a) => commands::select(&a),
        Command::Integrate(a) => commands::integrate(&a),
        Command::BuildGraph(a) => commands::build_graph(&a),
        Command::Train(a) => commands::train(&a),
        Command::Cv(a) => commands::cv(&a),
        Command::Importance(a) => commands::importance(&a),
        Command::Report(a) => commands::report(&a),
    }
}
