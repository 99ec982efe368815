//! `lbcnn`: train, refine, quantize, evaluate, and inspect light binary CNN
//! models. Every subcommand prints one JSON run report to stdout; failures
//! print an error JSON and exit 2 (usage), 3 (data), or 4 (numerical).

mod commands;
mod report;

use clap::{Parser, Subcommand, ValueEnum};
use lbcnn_core::error::Error;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "lbcnn", version, about = "Light binary CNN toolkit")]
struct Cli {
    /// Thread count for internal parallelism (results never depend on it).
    #[arg(long, global = true, value_name = "W")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Random kernel search; saves the best model.
    Search(SearchArgs),
    /// Gradient refinement of a saved model's output layer.
    Refine(RefineArgs),
    /// Quantize a model's output layer to b-bit integers.
    Quantize(QuantizeArgs),
    /// Accuracy and confusion matrix of a model on a dataset.
    Eval(EvalArgs),
    /// Class of a single PGM/PPM image.
    Predict(PredictArgs),
    /// Header facts of a model file; payloads stay unread.
    Inspect(InspectArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Big-endian IDX images + labels file pair.
    Idx,
    /// Directory of per-class subdirectories of PGM/PPM files.
    Pnm,
}

#[derive(clap::Args, serde::Serialize)]
pub struct DataArgs {
    /// Dataset encoding.
    #[arg(long, value_enum, default_value_t = DataFormat::Idx)]
    pub data_format: DataFormat,
    /// Training data: IMAGES,LABELS for idx; a directory for pnm.
    #[arg(long, value_name = "PATH")]
    pub train: Option<String>,
    /// Held-out data, same form as --train.
    #[arg(long, value_name = "PATH", conflicts_with = "split")]
    pub test: Option<String>,
    /// Keep this fraction of --train and hold out the rest, stratified.
    #[arg(long, value_name = "F", value_parser = fraction)]
    pub split: Option<f64>,
    /// Use only the first M training samples.
    #[arg(long, value_name = "M")]
    pub max_train: Option<usize>,
}

#[derive(clap::Args, serde::Serialize)]
pub struct SearchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Depthwise multipliers per macro-layer, e.g. 16,20.
    #[arg(long, value_delimiter = ',', required = true)]
    pub filters: Vec<usize>,
    /// Kernel sets to try.
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Master seed; trial seeds derive from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ridge regularization C.
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    pub reg: f64,
    /// Where to write the best model.
    #[arg(long, default_value = "model.lbcn")]
    pub out: PathBuf,
}

#[derive(clap::Args, serde::Serialize)]
pub struct RefineArgs {
    /// Model to refine (full precision).
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Passes over the training set.
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Adam step size.
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    pub lr: f64,
    /// Seed for the per-epoch shuffles (and --split when used).
    #[arg(long, default_value_t = 0)]
    pub shuffle_seed: u64,
    /// Output path; defaults to overwriting --model.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, serde::Serialize)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Signed-integer width for output weights, 2..=8.
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    /// Output path; defaults to overwriting --model.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(clap::Args, serde::Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Split seed when --split picks the held-out side.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(clap::Args, serde::Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PGM/PPM image matching the model's input shape.
    pub image: PathBuf,
}

#[derive(clap::Args, serde::Serialize)]
pub struct InspectArgs {
    pub model: PathBuf,
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive and finite, got {s}"))
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must be strictly between 0 and 1, got {s}"))
    }
}

pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e.exit_code() {
                4 => "numerical",
                _ => "data",
            },
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => e.exit_code(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn print_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": { "kind": kind, "message": message } });
    println!("{}", serde_json::to_string_pretty(&body).expect("static shape"));
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            print_error("usage", &e.to_string());
            return 2;
        }
    };

    if let Some(w) = cli.workers {
        if w == 0 {
            print_error("usage", "--workers must be at least 1");
            return 2;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            print_error("usage", &format!("cannot size thread pool: {e}"));
            return 2;
        }
    }

    let result = match &cli.command {
        Command::Search(args) => commands::cmd_search(args),
        Command::Refine(args) => commands::cmd_refine(args),
        Command::Quantize(args) => commands::cmd_quantize(args),
        Command::Eval(args) => commands::cmd_eval(args),
        Command::Predict(args) => commands::cmd_predict(args),
        Command::Inspect(args) => commands::cmd_inspect(args),
    };
    match result {
        Ok(report) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
            0
        }
        Err(e) => {
            print_error(e.kind(), &e.message());
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
