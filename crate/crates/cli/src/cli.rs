use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "kgdialog", version, about = "Knowledge-grounded dialogue: retrieval, training, evaluation and chat")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Index(IndexCmd),
    #[command(subcommand)]
    Nn(NnCmd),
    #[command(subcommand)]
    Train(TrainCmd),
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Chat with a bundle on stdin/stdout.
    Decode(DecodeArgs),
    /// Run the HTTP chat service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
pub enum CorpusCmd {
    /// Check a knowledge base and dialogue file; exits nonzero on any violation.
    Validate { kb: PathBuf, dialogues: PathBuf },
    /// Convert the public release layout to the dialogue schema.
    Convert {
        #[arg(long)]
        released: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the bundled toy knowledge base and dialogues.
    Toy {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum IndexCmd {
    Build {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        buckets: u64,
        #[arg(long, default_value_t = 2)]
        ngram: u8,
    },
    Query {
        #[arg(long)]
        index: PathBuf,
        /// Shows titles when given.
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long = "q")]
        query: String,
        #[arg(short, default_value_t = 7)]
        k: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum NnCmd {
    /// Central finite-difference check of every encoder-decoder parameter.
    Gradcheck {
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Prebuilt index; built in memory from the KB when absent.
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Longest token sequence the model reads.
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    #[arg(long, default_value_t = 2000)]
    pub merges: usize,
    #[arg(long, default_value_t = 17)]
    pub model_seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    /// Stop once a full pass averages below this loss.
    #[arg(long)]
    pub target_loss: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainCommon {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Warm-start from parameters with matching names and shapes.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EncoderArg {
    Transformer,
    Bow,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Attention,
    None,
    Gold,
    TwoStage,
}

#[derive(Subcommand, Debug)]
pub enum TrainCmd {
    Selector {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long, value_enum, default_value_t = EncoderArg::Transformer)]
        encoder: EncoderArg,
    },
    Retrieval {
        #[command(flatten)]
        common: TrainCommon,
        #[arg(long, value_enum, default_value_t = ModeArg::Attention)]
        mode: ModeArg,
        /// Selector bundle for two-stage mode.
        #[arg(long)]
        selector: Option<PathBuf>,
    },
    E2e {
        #[command(flatten)]
        common: TrainCommon,
        #[command(flatten)]
        gen: GenArgs,
    },
    TwoStage {
        #[command(flatten)]
        common: TrainCommon,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        selector: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub kd: f64,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub max_decode_len: usize,
    #[arg(long)]
    pub length_normalize: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalCommon {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test_seen")]
    pub split: String,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SelectorBaseline {
    Random,
    Ir,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenMode {
    Predicted,
    Gold,
}

#[derive(Subcommand, Debug)]
pub enum EvalCmd {
    Selector {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, required_unless_present = "baseline")]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<SelectorBaseline>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Retrieval {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, required_unless_present = "random")]
        bundle: Option<PathBuf>,
        /// Rank with a seeded random scorer instead of a model.
        #[arg(long)]
        random: bool,
        /// Candidate pool: `seeded100` or `seeded<N>`.
        #[arg(long, default_value = "seeded100")]
        pool: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    Gen {
        #[command(flatten)]
        common: EvalCommon,
        #[arg(long, required_unless_present = "repeat_last")]
        bundle: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GenMode::Predicted)]
        mode: GenMode,
        /// Score the repeat-last-utterance baseline instead of a model.
        #[arg(long)]
        repeat_last: bool,
    },
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub topic: String,
    /// Print the selected knowledge with each reply.
    #[arg(long)]
    pub interactive: bool,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory for finished transcripts.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
