//! `flowrec` command-line runner.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors (including
//! missing inputs), 1 on runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A failed command, tagged with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Failure::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn runtime(msg: impl std::fmt::Display) -> Self {
        Failure::Runtime(anyhow::anyhow!("{msg}"))
    }
}

impl From<flowrec::Error> for Failure {
    fn from(e: flowrec::Error) -> Self {
        use flowrec::Error as E;
        match &e {
            E::Config(_) | E::Parse { .. } | E::Checkpoint(_) | E::DuplicateTitle { .. } => {
                Failure::Usage(e.into())
            }
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Usage(e.into())
            }
            _ => Failure::Runtime(e.into()),
        }
    }
}

#[derive(Parser)]
#[command(name = "flowrec", version, about = "Flow-guided fine-tuning for next-item recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split an interaction log; write dataset and catalog manifests.
    Ingest(IngestArgs),
    /// Write a synthetic interaction log with Zipf item popularity.
    MakeZipf(ZipfArgs),
    /// Train a policy and write checkpoints plus a per-epoch log.
    Train(TrainArgs),
    /// Write recommendation lists for a split using a trained run.
    Generate(GenerateArgs),
    /// Score a run's recommendations.
    Eval(EvalArgs),
    /// Train, generate and evaluate once per value of one setting.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: String,
    #[arg(long, default_value_t = 5)]
    pub k_core: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value = "word")]
    pub tokenizer: String,
    /// Inclusive timestamp window `start,end`.
    #[arg(long)]
    pub time_window: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ZipfArgs {
    #[arg(long)]
    pub items: usize,
    #[arg(long, default_value_t = 1.0)]
    pub exponent: f64,
    #[arg(long)]
    pub interactions: usize,
    #[arg(long, default_value_t = 100)]
    pub users: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
}

/// Settings shared by `train` and `sweep`; each flag overrides the config
/// file, which overrides the defaults.
#[derive(Args, Default)]
pub struct TrainFlags {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by `ingest`.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    /// plain, div or mul.
    #[arg(long)]
    pub reward_variant: Option<String>,
    /// Subtrajectory length k, or `whole`.
    #[arg(long)]
    pub granularity: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub momentum: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub max_steps: Option<String>,
    /// On-policy samples per training example.
    #[arg(long)]
    pub samples: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub sft_weight: Option<String>,
    /// Cross-entropy only (lambda = 0).
    #[arg(long)]
    pub sft_only: bool,
    /// Flow-guided term only (SFT weight 0).
    #[arg(long)]
    pub subtb_only: bool,
    /// Ignore user histories.
    #[arg(long)]
    pub history_free: bool,
    /// Average the flow-guided term over sampled titles.
    #[arg(long)]
    pub subtb_mean: bool,
    /// tabular or contextual.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub pref_alpha: Option<String>,
    /// JSONL of externally computed `{user, item, p}` preference scores.
    #[arg(long)]
    pub pref_scores: Option<String>,
    #[arg(long)]
    pub frequency_floor: Option<String>,
    #[arg(long)]
    pub eval_k: Option<String>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Args, Default)]
pub struct DecodeFlags {
    /// Recommendation list length used for accuracy metrics.
    #[arg(long)]
    pub k: Option<String>,
    /// List cutoff for fairness and diversity metrics.
    #[arg(long)]
    pub fair_k: Option<String>,
    /// Number of popularity groups.
    #[arg(long)]
    pub groups: Option<String>,
    #[arg(long)]
    pub temperature: Option<String>,
    /// topk or sample.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub decode_seed: Option<String>,
    /// train, valid or test.
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Run directory.
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to load instead of the run's best one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub decode: DecodeFlags,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Setting to vary, e.g. lambda or granularity.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    /// Directory holding one run per value plus sweep.csv.
    #[arg(long)]
    pub out: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(&a),
        Command::MakeZipf(a) => commands::make_zipf(&a),
        Command::Train(a) => commands::train(&a),
        Command::Generate(a) => commands::generate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
