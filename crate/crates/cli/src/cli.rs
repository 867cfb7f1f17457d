use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dreamstate::diffusion::NoiseMode;

pub const DEFAULT_PROMPT_A: &str = "I need an interesting story on perseverance";
pub const DEFAULT_PROMPT_B: &str = "A story about a desert facing climate change";

#[derive(Debug, Parser)]
#[command(
    name = "dreamstate",
    version,
    about = "Toy RWKV state and parameter synthesis with diffusion"
)]
pub struct Cli {
    /// key=value config file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set model.d_model=16
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed; falls back to training.seed, then $DREAMSTATE_SEED, then 0
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write outputs here instead of a fresh directory under paths.output
    #[arg(long, global = true, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy language model on the corpus
    TrainLm(TrainArgs),
    /// Run every corpus prompt and save one layer's final states
    ExtractStates {
        #[arg(long, value_name = "CKPT")]
        lm: Option<PathBuf>,
    },
    /// Train the state DiT on an extracted dataset
    TrainStateDit {
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Sample a state for a prompt and generate from it
    SampleState {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        deterministic: bool,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Sample states along a slerp between two prompts' starting noise
    Interpolate {
        #[arg(long, default_value = DEFAULT_PROMPT_A)]
        prompt_a: String,
        #[arg(long, default_value = DEFAULT_PROMPT_B)]
        prompt_b: String,
        /// Comma-separated interpolation weights in [0, 1]
        #[arg(
            long = "lambda",
            value_delimiter = ',',
            default_value = "0,0.25,0.5,0.75,1"
        )]
        lambdas: Vec<f64>,
        #[command(flatten)]
        models: ModelArgs,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Jointly train the language model and the parameter DiT
    TrainHybrid {
        /// Start from this language model instead of a fresh one
        #[arg(long, value_name = "CKPT")]
        lm: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Project a state dataset to 2-D and score its clustering
    Analyze {
        #[arg(long, value_name = "FILE")]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Method::Tsne)]
        method: Method,
        #[arg(long, default_value_t = 10.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
    },
    /// Perplexity of the static model and of the hybrid model
    Eval {
        /// Static model; defaults to the hybrid checkpoint's own base weights
        #[arg(long, value_name = "CKPT")]
        lm: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        hybrid: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Steps to run in this invocation; defaults to training.steps
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint of the same trainer
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_name = "CKPT")]
    pub lm: Option<PathBuf>,
    #[arg(long, value_name = "CKPT")]
    pub dit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long, default_value = "iid")]
    pub noise: NoiseMode,
    #[arg(long, default_value_t = 0.5)]
    pub noise_strength: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Tokens to generate after the prompt
    #[arg(long, default_value_t = 48)]
    pub generate: usize,
    /// 0 means greedy decoding
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Pca,
    Tsne,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainLm(_) => "train-lm",
            Command::ExtractStates { .. } => "extract-states",
            Command::TrainStateDit { .. } => "train-state-dit",
            Command::SampleState { .. } => "sample-state",
            Command::Interpolate { .. } => "interpolate",
            Command::TrainHybrid { .. } => "train-hybrid",
            Command::Analyze { .. } => "analyze",
            Command::Eval { .. } => "eval",
        }
    }
}
