use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

/// Voice conversion with fixed-size stylebooks on a synthetic corpus.
#[derive(Parser, Debug)]
#[command(name = "stylebook", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; missing sections use defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for every artifact. Overrides `run_dir` from the
    /// config file.
    #[arg(long, global = true, env = "STYLEBOOK_RUN_DIR")]
    pub run_dir: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=500`. Values are
    /// parsed as TOML and fall back to plain strings.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus.
    SynthCorpus(SynthArgs),
    /// Fit the k-means content codebook on the training split.
    FitUnits(FitUnitsArgs),
    /// Train the model and write a checkpoint.
    Train(TrainArgs),
    /// Summarize target utterances into a stylebook file.
    Enroll(EnrollArgs),
    /// Convert a source utterance with a stored stylebook.
    Convert(ConvertArgs),
    /// kNN frame-matching baseline.
    BaselineKnn(KnnArgs),
    /// Style storage cost per method and target length.
    BenchMemory(MemoryArgs),
    /// Score cross-speaker conversions on the evaluation split.
    Evaluate(EvaluateArgs),
    /// Per-class retrieval attention profiles as TSV tables.
    AnalyzeAttention(AttentionArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Corpus directory [default: <run_dir>/corpus]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FitUnitsArgs {
    /// [default: <run_dir>/corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Codebook matrix file [default: <run_dir>/units.sbmt]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Codebook size; must match the model's unit count.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// [default: <run_dir>/corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// [default: <run_dir>/units.sbmt]
    #[arg(long)]
    pub units: Option<PathBuf>,
    /// Final checkpoint [default: <run_dir>/checkpoint.sbck]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Seed of batch sampling and diffusion draws.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EnrollArgs {
    /// [default: <run_dir>/checkpoint.sbck]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Utterance files of the target speaker.
    #[arg(long = "target", conflicts_with = "speaker")]
    pub targets: Vec<PathBuf>,
    /// Enroll every evaluation-split utterance of this corpus speaker.
    #[arg(long, required_unless_present = "targets")]
    pub speaker: Option<usize>,
    /// Used with `--speaker` [default: <run_dir>/corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// [default: <run_dir>/stylebooks/spkNNN.stbk with --speaker]
    #[arg(long, required_unless_present = "speaker")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// [default: <run_dir>/checkpoint.sbck]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub stylebook: PathBuf,
    /// Source utterance file.
    #[arg(long)]
    pub source: PathBuf,
    /// Converted mel matrix file.
    #[arg(long)]
    pub out: PathBuf,
    /// Reverse-diffusion steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_style: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct KnnArgs {
    /// Target utterance files; their mel frames form the bank.
    #[arg(long = "target", required = true)]
    pub targets: Vec<PathBuf>,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = stylebook_core::knn::DEFAULT_K)]
    pub k: usize,
    /// Also write the bank as a matrix file.
    #[arg(long)]
    pub bank_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MemoryArgs {
    /// Target lengths in seconds.
    #[arg(long, value_delimiter = ',', default_values_t = [10.0, 60.0, 300.0])]
    pub seconds: Vec<f64>,
    /// [default: <run_dir>/memory.tsv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// [default: <run_dir>/checkpoint.sbck]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: <run_dir>/corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// [default: <run_dir>/eval.json]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AttentionArgs {
    /// [default: <run_dir>/checkpoint.sbck]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: <run_dir>/corpus]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// [default: <run_dir>/attention]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
            let line = serde_json::json!({
                "error": chain.first().cloned().unwrap_or_default(),
                "causes": &chain[1.min(chain.len())..],
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
