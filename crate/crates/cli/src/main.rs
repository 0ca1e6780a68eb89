mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Error caused by the invocation rather than the work itself; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "seval", version, about = "Architecture-to-string surrogate evaluation and constrained search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample architectures and write their oracle metrics as a JSONL dataset.
    GenDataset(GenDatasetArgs),
    /// Train an evaluator on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run aging evolution with optional predicted-metric constraints.
    Search(SearchArgs),
    /// Print the string encoding of an architecture.
    Net2str(Net2StrArgs),
    /// Compare analytic and numeric gradients of the tiny model.
    GradCheck(GradCheckArgs),
}

// Every subcommand also reads its options from a JSON file via `--config`
// (keys are the long flag names); flags given on the command line win.

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenDatasetArgs {
    /// JSON file with default option values.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Search space: tss or sss.
    #[arg(long)]
    pub space: Option<String>,
    /// Number of distinct architectures.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory of device profile JSON files (also SEVAL_PROFILE_DIR).
    #[arg(long)]
    pub profiles_dir: Option<PathBuf>,
    /// Override every profile's latency noise sigma.
    #[arg(long)]
    pub latency_noise: Option<f64>,
    /// Standard deviation of synthetic accuracy noise, in points.
    #[arg(long)]
    pub accuracy_noise: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated metric names, e.g. accuracy,memory.
    #[arg(long, value_delimiter = ',')]
    pub objectives: Vec<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Readout: mean or first.
    #[arg(long)]
    pub readout: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Learning-rate schedule: cosine or constant.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Keep the final weights rather than the best validation epoch.
    #[arg(long)]
    pub keep_last: bool,
    /// Initialization and shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the train/val/test split.
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Traversal: postorder_dfs or bfs.
    #[arg(long)]
    pub traversal: Option<String>,
    /// Regress raw rather than log-scaled hardware targets.
    #[arg(long)]
    pub linear_targets: bool,
    /// Checkpoint path; the loss history goes next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Records to score: test, val, train or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Score even if the dataset yields a different vocabulary.
    #[arg(long)]
    pub allow_vocab_mismatch: bool,
    /// Directory for report.json and per-metric scatter CSVs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SearchArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub space: Option<String>,
    /// Evaluator used for constraints.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluator used for evaluator_accuracy fitness (defaults to --checkpoint).
    #[arg(long)]
    pub fitness_checkpoint: Option<PathBuf>,
    /// `metric<=value|auto-mean|auto-median` or `>=`; repeatable.
    #[arg(long = "constraint")]
    pub constraints: Vec<String>,
    /// Dataset for auto thresholds.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Fitness: synthetic_proxy or evaluator_accuracy.
    #[arg(long)]
    pub fitness: Option<String>,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub tournament: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub profiles_dir: Option<PathBuf>,
    /// Directory for summary.json and log.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Net2StrArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Architecture id such as tss/125 or tss:conv_3x3,none,...
    pub arch: Option<String>,
    /// Traversal: postorder_dfs or bfs.
    #[arg(long)]
    pub traversal: Option<String>,
    #[arg(long)]
    pub cells_per_stage: Option<usize>,
    /// Stage widths, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
}

#[derive(Args, Serialize, Deserialize, Default, Debug)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GradCheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// f64, f32 or both.
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenDataset(a) => commands::gen_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Search(a) => commands::search(a),
        Command::Net2str(a) => commands::net2str(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
