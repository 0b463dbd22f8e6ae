mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdr_core::eval::Protocol;
use mdr_core::regimes::{Regime, SizePreset};

/// Multimodal dialogue response retrieval on synthetic data.
#[derive(Debug, Parser)]
#[command(name = "mdr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/dev/test JSONL splits and a manifest.
    GenData(GenDataArgs),
    /// Train one regime and write checkpoints, metrics and a summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Rank a split's responses for one context.
    Retrieve(RetrieveArgs),
    /// Collect run summaries into a comparison CSV.
    Report(ReportArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of training dialogues.
    #[arg(long)]
    pub dialogues: Option<usize>,
    #[arg(long)]
    pub dev_dialogues: Option<usize>,
    #[arg(long)]
    pub test_dialogues: Option<usize>,
    /// Fraction of tokens replaced by off-topic tokens.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Probability of flipping an example's response modality.
    #[arg(long)]
    pub ambiguity: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_regime)]
    pub regime: Regime,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<SizePreset>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated subset of text, image, multimodal.
    #[arg(long, value_delimiter = ',', value_parser = parse_protocol)]
    pub protocols: Option<Vec<Protocol>>,
    #[arg(long)]
    pub pool_seed: Option<u64>,
    /// Use one shared candidate set per modality for the whole split.
    #[arg(long)]
    pub shared_pool: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Utterances separated by '/', token ids by ','.
    #[arg(long)]
    pub context: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Split whose responses form the candidate pool.
    #[arg(long, default_value = "test")]
    pub pool_from: String,
    #[arg(short = 'k', long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: mdr_core::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: mdr_core::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<SizePreset, String> {
    match s {
        "small" => Ok(SizePreset::Small),
        "large" => Ok(SizePreset::Large),
        other => Err(format!("unknown preset {other:?} (expected small or large)")),
    }
}

/// 1 usage or config, 2 data, 3 numerical abort.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mdr_core::Error>() {
            return match e {
                mdr_core::Error::Config(_) => 1,
                mdr_core::Error::Numerical { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<commands::UsageError>().is_some() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Retrieve(a) => commands::retrieve(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
