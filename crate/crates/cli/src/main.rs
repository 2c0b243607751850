mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "eas", version, about = "Etiology-aware attention steering toolkit")]
pub struct Cli {
    /// Seed override for every seeded step of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (EAS_OUT_DIR takes precedence).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Accepted for compatibility; computation is single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus as JSONL.
    GenCorpus(GenCorpusArgs),
    /// Score attention heads and select per-stage heads.
    IdentifyHeads(IdentifyArgs),
    /// Pretrain a base model or fine-tune adapters (phase set in --config).
    Train(TrainArgs),
    /// Diagnose a corpus and write metrics.
    Evaluate(EvaluateArgs),
    /// Cross-dataset head overlap and heatmaps from score tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Scaffold JSON; the built-in scaffold when omitted.
    #[arg(long)]
    pub scaffold: Option<PathBuf>,
    /// Records per disease.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value = "consistent")]
    pub mode: String,
    /// Output file stem.
    #[arg(long, default_value = "corpus")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file; defaults to vocab.json beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Size of the label-balanced subset scored.
    #[arg(long, default_value_t = 30)]
    pub limit: usize,
    #[arg(long, default_value_t = 4)]
    pub max_new: usize,
    #[arg(long, default_value_t = 2)]
    pub per_stage: usize,
    /// Dataset name written into the outputs.
    #[arg(long, default_value = "dataset")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub ablation: Option<String>,
    /// Train on every fold except this one.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Main corpus (restricted to the held-out fold with --fold).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Second corpus evaluated whole, e.g. a discrepant cohort.
    #[arg(long)]
    pub discrepant: Option<PathBuf>,
    /// Head selection JSON; enables the focus score.
    #[arg(long)]
    pub heads: Option<PathBuf>,
    #[arg(long, default_value = "generate")]
    pub mode: String,
    /// Feed records without reasoning markers.
    #[arg(long)]
    pub plain: bool,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub fold_seed: u64,
    /// Paired metrics files `A.json:B.json`, one per fold; two or more
    /// pairs add one-sided signed-rank p values for A > B.
    #[arg(long)]
    pub paired: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Score tables as `name=path.csv`.
    #[arg(long, required = true)]
    pub eas: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code()
}
