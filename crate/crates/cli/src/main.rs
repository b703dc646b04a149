mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Multi-modal queried detection on a synthetic shapes benchmark.
#[derive(Debug, Parser)]
#[command(name = "mqdet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset (images, annotations, vocabulary).
    GenData(GenDataArgs),
    /// Train the text-queried detector from scratch on the pretrain split.
    PretrainBaseline(PretrainArgs),
    /// Extract a vision query bank from a dataset split.
    BuildBank(BuildBankArgs),
    /// Train the GCP modules on top of a frozen detector.
    Modulate(ModulateArgs),
    /// Finetuning-free evaluation on a dataset split.
    Eval(EvalArgs),
    /// Detect on a single image.
    Infer(InferArgs),
    /// Modulate and evaluate once per value of one ablation axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// JSON experiment configuration, or a resolved-config.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for data generation and training (defaults to the config's, else 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildBankArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Split whose annotated instances fill the bank.
    #[arg(long, default_value = "pretrain")]
    pub split: String,
    /// Extra exemplars: JSON list of {image_path, bbox, category}.
    #[arg(long)]
    pub exemplars: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Bank built from the pretrain split.
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// One of mlp, scalar_only, linear, mlp_concat. Rebuilds the GCP stack.
    #[arg(long)]
    pub gate_variant: Option<String>,
    /// One of all, none, text-encoder.
    #[arg(long)]
    pub freeze: Option<String>,
    /// Vision queries per category during training.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Bank for vision and multimodal queries (usually the fewshot split).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// One of text, vision, multimodal.
    #[arg(long, default_value = "multimodal")]
    pub query_mode: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value = "eval")]
    pub split: String,
    /// Also run the query-quality harness with exemplars from the fewshot split.
    #[arg(long)]
    pub query_quality: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory; only its vocab.json is read.
    #[arg(long)]
    pub data: PathBuf,
    /// Binary PPM image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    pub query_mode: String,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Baseline checkpoint from pretrain-baseline.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// One of mask_rate, gate_variant, freeze, k, gcp_layers.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values; gcp_layers lists use `+`, e.g. `3,2+3`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long, default_value = "multimodal")]
    pub query_mode: String,
    #[arg(long, default_value = "eval")]
    pub split: String,
}

/// A mistake in the invocation rather than a failure while running it.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::PretrainBaseline(a) => commands::pretrain(&a),
        Command::BuildBank(a) => commands::build_bank(&a),
        Command::Modulate(a) => commands::modulate(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<Usage>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
