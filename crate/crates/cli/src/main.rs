mod commands;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use latte_core::synth::SynthKind;

/// Few-shot tabular learning with a task knowledge vector.
#[derive(Debug, Parser)]
#[command(name = "latte", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract the task knowledge vector from the dataset metadata.
    ExtractKnowledge(RunArgs),
    /// Meta-pretrain on the unlabeled rows; one checkpoint per variant and seed.
    Pretrain(RunArgs),
    /// Fine-tune pretrained checkpoints on every few-shot split.
    Finetune(RunArgs),
    /// Run the full variant/seed/shot sweep and write the report files.
    Evaluate(RunArgs),
    /// Rebuild aggregate.txt from an existing results.csv.
    Report(ReportArgs),
    /// Write a synthetic dataset and a matching config file.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated shot counts.
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    /// Variant to run (`full`, `no-meta`, `no-llm-meta`, ...); repeatable.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKindArg {
    Blobs,
    FeatureIdentity,
    Regression,
}

impl From<SynthKindArg> for SynthKind {
    fn from(k: SynthKindArg) -> Self {
        match k {
            SynthKindArg::Blobs => SynthKind::Blobs,
            SynthKindArg::FeatureIdentity => SynthKind::FeatureIdentity,
            SynthKindArg::Regression => SynthKind::LinearRegression,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "blobs")]
    pub kind: SynthKindArg,
    /// Directory for metadata.toml, train.csv, test.csv and latte.toml.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Labeled pool size (per class for classification).
    #[arg(long, default_value_t = 100)]
    pub labeled: usize,
    #[arg(long, default_value_t = 400)]
    pub unlabeled: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_USAGE } else { 0 });
        }
    };
    let outcome = match cli.command {
        Command::ExtractKnowledge(args) => commands::extract_knowledge(&args),
        Command::Pretrain(args) => commands::pretrain(&args),
        Command::Finetune(args) => commands::finetune(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
        Command::Report(args) => commands::report(&args),
        Command::Synth(args) => commands::synth(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
