//! `sohf`: synthetic data, preprocessing, training, evaluation, ablation and
//! inspection from the command line.
//!
//! Exit codes: 0 ok, 2 configuration, 3 missing artifact, 4 integrity, 1 other.

mod commands;
mod data;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "sohf", version, about = "Early-cycle battery degradation trajectory forecasting")]
struct Cli {
    /// Run every stage on one thread
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic battery records from a TOML spec
    Synth(SynthArgs),
    /// Clean records and build model inputs and targets
    Preprocess(PreprocessArgs),
    /// Train on a condition-exclusive split and score the test part
    Train(TrainArgs),
    /// Score a checkpoint, optionally over several early-cycle counts
    Evaluate(EvaluateArgs),
    /// Train and score ablation variants on one split
    Ablate(AblateArgs),
    /// Export forecast, prototypes, attention and DVA for one battery
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// SynthSpec TOML; defaults when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// record directory (a `records/` subdirectory is used when present)
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// ModelConfig TOML fixing S_max, L, T_max and S; desk defaults when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// SmoothingParams TOML
    #[arg(long)]
    pub smoothing: Option<PathBuf>,
    /// early cycles S to build inputs from
    #[arg(long)]
    pub s_cycles: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitKind {
    Random,
    LeaveOneOut,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_enum, default_value = "random")]
    pub split: SplitKind,
    /// train:val:test condition ratios for the random split
    #[arg(long, default_value = "6,2,2", value_delimiter = ',', num_args = 3)]
    pub ratios: Vec<f64>,
    /// held-out condition index for leave-one-out
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// split and subsampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// fraction of training batteries kept
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// ModelConfig TOML; desk defaults when absent
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// preprocessed sample directory
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub variant: Option<soh_core::Variant>,
    /// condition key → vector JSON for the language-embedder path
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartArg {
    Test,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// which conditions of the checkpoint's split to score; `all` refuses
    /// conditions seen in training
    #[arg(long, value_enum, default_value = "test")]
    pub part: PartArg,
    /// early-cycle sweep, e.g. `10,25,50,100`
    #[arg(long, value_delimiter = ',')]
    pub s_cycles: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    /// variants to run; all seven when absent
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<soh_core::Variant>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub battery: String,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { soh_core::parallel::Exec::Sequential } else { soh_core::parallel::Exec::Parallel };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, exec),
        Command::Preprocess(a) => commands::preprocess(&a, exec),
        Command::Train(a) => commands::train(&a, exec),
        Command::Evaluate(a) => commands::evaluate(&a, exec),
        Command::Ablate(a) => commands::ablate(&a, exec),
        Command::Inspect(a) => commands::inspect(&a),
    };
    match result {
        Ok(m) => {
            println!("{}", m.summary_line());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
