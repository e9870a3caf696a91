//! Command-line driver: synthetic data, training, evaluation and exports.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "flowcon", version, about = "Flow-based contrastive OOD detection on feature vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test/OOD feature files.
    GenSynth(GenSynthArgs),
    /// Train a flow from a config file, then write prototypes and a JSONL log.
    Train(TrainArgs),
    /// Score ID and OOD sets, write JSON reports and histogram CSVs.
    Eval(EvalArgs),
    /// Bayes-rule accuracy on labelled features.
    Classify(ClassifyArgs),
    /// Latent codes as CSV, one row per input row.
    ExportEmbed(ExportEmbedArgs),
    /// Score histograms only, same inputs as `eval`.
    ExportHist(EvalArgs),
    /// Train and evaluate once per lambda and tabulate the metrics.
    SweepLambda(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Moons,
    Blobs,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    /// Output directory for train.fcft, test.fcft and ood.fcft.
    #[arg(long)]
    pub out: PathBuf,
    /// Training rows (moons: total; blobs: per class).
    #[arg(long)]
    pub n: Option<usize>,
    /// Held-out rows, same unit as --n [default: n / 4].
    #[arg(long)]
    pub n_test: Option<usize>,
    /// OOD rows [default: moons 400, blobs all test rows].
    #[arg(long)]
    pub n_ood: Option<usize>,
    /// Moons only: Gaussian noise scale [default: 0.08].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Blobs only: number of classes [default: 10].
    #[arg(long)]
    pub k: Option<usize>,
    /// Blobs only: feature dimension [default: 64].
    #[arg(long)]
    pub d: Option<usize>,
    /// Blobs only: radius of the class-mean sphere [default: 5].
    #[arg(long)]
    pub mean_scale: Option<f64>,
    /// Blobs only: per-coordinate standard deviation [default: 1].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Blobs only: OOD blob offset in units of --mean-scale [default: 8].
    #[arg(long)]
    pub displacement: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config entry, e.g. `--set lambda=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prototypes: PathBuf,
    #[arg(long)]
    pub id_test: PathBuf,
    /// OOD set as NAME=PATH. Repeatable.
    #[arg(long = "ood", value_name = "NAME=PATH", required = true)]
    pub ood: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// OOD rows drawn per ID row.
    #[arg(long, default_value_t = flowcon::metrics::DEFAULT_OOD_RATIO)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = flowcon::metrics::HISTOGRAM_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prototypes: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the result here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportEmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input as SOURCE=PATH; SOURCE becomes the tag column. Repeatable.
    #[arg(long = "data", value_name = "SOURCE=PATH", required = true)]
    pub data: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Base training config; `lambda` and `out_dir` are overridden per run.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.07,0.3,0.5,1.0")]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub id_test: PathBuf,
    #[arg(long = "ood", value_name = "NAME=PATH", required = true)]
    pub ood: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = flowcon::metrics::DEFAULT_OOD_RATIO)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
