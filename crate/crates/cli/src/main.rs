//! Command-line entry point for data generation, the training regimes,
//! splitting, evaluation, serving and embedding analysis.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use submodel::data::Split;
use submodel::train::{AdaptMode, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "submodel", version, about = "Frozen basemodels with per-speaker residual-adapter submodels")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic speaker population and its corpora
    GenData(GenDataArgs),
    /// Train a basemodel on the typical speakers
    TrainBase(TrainBaseArgs),
    /// Fine-tune every basemodel parameter per speaker
    FinetuneFull(PerSpeakerArgs),
    /// Train independent per-speaker submodels
    TrainSubmodel(TrainSubmodelArgs),
    /// Train N submodels jointly as a one-hot bundle
    TrainOnehot(BundleArgs),
    /// Split a one-hot bundle into per-speaker submodel files
    Split(SplitArgs),
    /// Train one shared submodel on pooled data
    TrainPooled(PooledArgs),
    /// Train adapter banks mixed by a per-speaker embedding
    TrainEmbedding(EmbeddingArgs),
    /// Adapt a trained embedding bundle to a new speaker
    AdaptSpeaker(AdaptArgs),
    /// Score one approach on a split
    Eval(EvalArgs),
    /// Combine evaluation reports into a comparison table
    Report(ReportArgs),
    /// Serve inference requests over TCP
    Serve(ServeArgs),
    /// Time submodel loads against basemodel reloads
    BenchLoad(BenchLoadArgs),
    /// Write per-speaker embedding vectors as JSON lines
    ExportEmbeddings(ExportArgs),
    /// Pairwise etiology separability of exported embeddings
    Probe(ProbeArgs),
    /// Submodel parameter count and on-disk size
    Params(ParamsArgs),
}

#[derive(Args, Debug, Serialize)]
struct TrainFlags {
    /// Optimizer steps (command-specific default)
    #[arg(long)]
    steps: Option<usize>,
    /// Adam learning rate (command-specific default)
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Start adapters with a zero up-projection
    #[arg(long)]
    zero_up_init: bool,
}

impl TrainFlags {
    fn resolve(&self, steps: usize, lr: f32) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps.unwrap_or(steps),
            lr: self.lr.unwrap_or(lr),
            seed: self.seed,
            zero_up_init: self.zero_up_init,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    etiologies: usize,
    #[arg(long, default_value_t = 4)]
    typical: usize,
    /// Utterances per speaker
    #[arg(long, default_value_t = 300)]
    utts: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 8)]
    d_in: usize,
    /// Weight of speaker idiosyncrasy relative to etiology
    #[arg(long, default_value_t = submodel::data::DEFAULT_KAPPA)]
    kappa: f32,
    #[arg(long, default_value_t = submodel::data::DEFAULT_NOISE_STD)]
    noise_std: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct TrainBaseArgs {
    /// Population directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Initialization seed for the basemodel weights
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug, Serialize)]
struct PerSpeakerArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these speakers (default: all)
    #[arg(long = "speaker")]
    speakers: Vec<u64>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug, Serialize)]
struct TrainSubmodelArgs {
    #[command(flatten)]
    common: PerSpeakerArgs,
    #[arg(long, default_value_t = 8)]
    d_b: usize,
    /// Concurrent speaker jobs (0 = one per core)
    #[arg(long, default_value_t = 0)]
    parallel: usize,
}

#[derive(Args, Debug, Serialize)]
struct BundleArgs {
    #[command(flatten)]
    common: PerSpeakerArgs,
    #[arg(long, default_value_t = 8)]
    d_b: usize,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PooledArgs {
    #[command(flatten)]
    common: PerSpeakerArgs,
    /// Bottleneck width (default: twice the per-speaker 8)
    #[arg(long, default_value_t = 16)]
    d_b: usize,
}

#[derive(Args, Debug, Serialize)]
struct EmbeddingArgs {
    #[command(flatten)]
    common: PerSpeakerArgs,
    #[arg(long, default_value_t = 8)]
    d_b: usize,
    /// Adapter banks per layer
    #[arg(long, default_value_t = 8)]
    banks: usize,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    EmbOnly,
    EmbAndBanks,
}

impl From<ModeArg> for AdaptMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::EmbOnly => AdaptMode::EmbOnly,
            ModeArg::EmbAndBanks => AdaptMode::EmbAndBanks,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct AdaptArgs {
    /// Corpus file of the new speaker
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "emb-and-banks")]
    mode: ModeArg,
    /// Keep only the first N training utterances
    #[arg(long)]
    train_utts: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum VariantArg {
    /// The basemodel alone
    Base,
    /// A store directory of per-speaker submodels
    Submodels,
    /// One submodel file shared by every speaker
    Pooled,
    /// A one-hot bundle file
    Onehot,
    /// An embedding bundle file
    Embedding,
    /// A directory of adapted embedding bundles, one per speaker
    Adapted,
    /// A directory of fully fine-tuned basemodels
    Full,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Model file or directory for the chosen variant
    #[arg(long)]
    model: Option<PathBuf>,
    /// Population directory; every disordered speaker is scored
    #[arg(long, required_unless_present = "corpus")]
    data: Option<PathBuf>,
    /// Individual corpus files to score instead of a population
    #[arg(long, conflicts_with = "data")]
    corpus: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "dev")]
    split: SplitArg,
    /// Row label in later reports (default: the variant name)
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// Evaluation reports written by eval
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ServeArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    #[arg(long, default_value_t = 8)]
    capacity: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchLoadArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExportArgs {
    #[arg(long)]
    embedding: PathBuf,
    /// Population directory supplying the etiology labels
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    /// embeddings.jsonl written by export-embeddings
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Label permutations for the chance-level baseline
    #[arg(long, default_value_t = 5)]
    shuffles: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ParamsArgs {
    #[arg(long, default_value_t = 32)]
    d_model: u64,
    #[arg(long, default_value_t = 8)]
    d_b: u64,
    #[arg(long, default_value_t = 4)]
    layers: u64,
    /// Append a manifest record under this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
