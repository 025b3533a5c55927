use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "codeseek",
    version,
    about = "Train, evaluate and serve a contrastive code search model"
)]
pub struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, env = "CODESEEK_SEED")]
    pub seed: Option<u64>,

    /// JSON or TOML file overriding a preset (see README).
    #[arg(long, global = true, env = "CODESEEK_CONFIG")]
    pub config: Option<PathBuf>,

    /// Directory that relative input paths are resolved against.
    #[arg(long, global = true, env = "CODESEEK_DATA_ROOT")]
    pub data_root: Option<PathBuf>,

    /// Where to write the run manifest; defaults to `<output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load CodeSearchNet-style JSONL (or generate a synthetic set) into a corpus file.
    Ingest(IngestArgs),
    /// Multimodal contrastive pre-training.
    Train(TrainArgs),
    /// In-batch fine-tuning with validation-MRR model selection.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Evaluate a pre-trained checkpoint without fine-tuning.
    ZeroShot(EvalArgs),
    /// Train and evaluate once per hyperparameter value.
    Sweep(SweepArgs),
    /// Embed a corpus into a search index.
    Index(IndexArgs),
    /// Query an index.
    Search(SearchArgs),
    /// Serve the search API and static web assets.
    Serve(ServeArgs),
    /// Write code and query embeddings as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HitFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// JSONL files; each line needs `code_tokens` and `docstring_tokens`.
    #[arg(long = "input", required_unless_present_any = ["synthetic", "demo"])]
    pub inputs: Vec<PathBuf>,
    /// Language of the inputs; inferred from the file name when omitted.
    #[arg(long)]
    pub language: Option<String>,
    /// Generate this many template pairs instead of reading files.
    #[arg(long, conflicts_with_all = ["inputs", "demo"])]
    pub synthetic: Option<usize>,
    /// Use the bundled 100-pair demo set.
    #[arg(long, conflicts_with = "inputs")]
    pub demo: bool,
    #[arg(long, default_value_t = 0.1)]
    pub valid_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub test_frac: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "CODESEEK_PRESET")]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a saved pre-training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub metrics_csv: Option<PathBuf>,
    #[arg(long)]
    pub metrics_jsonl: Option<PathBuf>,
    /// Log every augmentation as JSON lines.
    #[arg(long)]
    pub augmentation_trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Starting point; a fresh model is built from the preset when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "CODESEEK_PRESET")]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Also optimize the query-anchored direction.
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long)]
    pub metrics_csv: Option<PathBuf>,
    #[arg(long)]
    pub metrics_jsonl: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
    /// Include every query's rank in the JSON report.
    #[arg(long)]
    pub ranks: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// `name=v1,v2;name=v3` with names lr, m, r and tau.
    #[arg(long)]
    pub grid: String,
    #[arg(long, env = "CODESEEK_PRESET")]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Which snippets to index; `all` takes every pair, the default takes the candidate pool.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, env = "CODESEEK_INDEX")]
    pub index: PathBuf,
    #[arg(long, env = "CODESEEK_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long = "q", alias = "query", required_unless_present = "interactive")]
    pub query: Option<String>,
    #[arg(long, short = 'k', default_value_t = 10)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = HitFormat::Table)]
    pub format: HitFormat,
    /// Prompt for queries until end of input.
    #[arg(long, short)]
    pub interactive: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CODESEEK_INDEX")]
    pub index: PathBuf,
    #[arg(long, env = "CODESEEK_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "CODESEEK_BIND", default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Directory of web assets served at `/`.
    #[arg(long, env = "CODESEEK_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
