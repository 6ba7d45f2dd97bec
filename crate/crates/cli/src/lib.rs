//! `styletune` command line: every pipeline stage over a shared run
//! directory, plus the selection service.

pub mod commands;
pub mod error;
pub mod run_dir;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use styletune_core::feedback::Strategy;

pub use error::{CliError, CliResult};
pub use run_dir::RunDirectory;

#[derive(Debug, Parser)]
#[command(
    name = "styletune",
    version,
    about = "Adapter-based style tuning at desk scale"
)]
pub struct Cli {
    /// Run directory holding every artifact.
    #[arg(long, global = true, env = "STYLEDROP_RUN_DIR", default_value = "run")]
    pub run_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic style/content corpus into data/.
    GenData(GenDataArgs),
    /// Fit the patch codebook, vocabulary and scorers.
    FitTokenizer(FitTokenizerArgs),
    /// Pretrain the base model on the pretraining pairs.
    Pretrain(PretrainArgs),
    /// Tune an adapter on one reference image.
    Tune(TuneArgs),
    /// Sample one image with the base model or a style adapter.
    Sample(SampleArgs),
    /// Sample one image from a style adapter and a content adapter.
    Compose(ComposeArgs),
    /// Sample and score a candidate pool with an adapter.
    Pool(PoolArgs),
    /// Select items from a pool.
    Select(SelectArgs),
    /// Full feedback round: tune, pool, select, retune, measure.
    Round(RoundArgs),
    /// Measure an adapter with the oracles and the proxy scores.
    Eval(EvalArgs),
    /// Serve pools and accept selections over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Clip,
    Human,
    Random,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Clip => Strategy::Clip,
            StrategyArg::Human => Strategy::Human,
            StrategyArg::Random => Strategy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemplateList {
    /// Two phrasings over the five pretraining shapes.
    Default,
    /// All five phrasings over all six shapes.
    Shapes,
    /// The photographic prompt list.
    Photo,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    pub seeds_per_pair: u64,
}

#[derive(Debug, Args)]
pub struct FitTokenizerArgs {
    #[arg(long, default_value_t = 128)]
    pub codebook_size: usize,
    #[arg(long, default_value_t = 4)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long, default_value_t = 12000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Reference image: a PNG file, or a catalog render.
#[derive(Debug, Clone, Args)]
pub struct ReferenceArgs {
    /// PNG reference image; overrides the catalog render.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Catalog style of the reference render (default: the held-out style).
    #[arg(long)]
    pub style_id: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub content_id: usize,
    #[arg(long, default_value_t = 0)]
    pub image_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AdapterTrainArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
}

#[derive(Debug, Clone, Args)]
pub struct GuidanceArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_b: f64,
    #[arg(long, default_value_t = 4.5)]
    pub temperature: f64,
    /// Decoding steps.
    #[arg(long, default_value_t = 12)]
    pub decode_steps: usize,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub reference: ReferenceArgs,
    /// Content text of the tuning prompt (default: the reference shape).
    #[arg(long)]
    pub prompt: Option<String>,
    /// Style descriptor of the tuning prompt (default: the reference
    /// style's); pass an empty string for a content adapter.
    #[arg(long)]
    pub style: Option<String>,
    /// 1: small shared adapters, 2: wide unshared adapters.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub round: u8,
    #[command(flatten)]
    pub train: AdapterTrainArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output checkpoint; bare names go under checkpoints/.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub style_adapter: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub style: Option<String>,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub style_adapter: PathBuf,
    #[arg(long)]
    pub content_adapter: PathBuf,
    /// Weight of the content adapter; 0.5 to 0.7 works well.
    #[arg(long, default_value_t = 0.6)]
    pub gamma: f64,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub style: String,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PromptListArgs {
    #[arg(long, value_enum, default_value_t = TemplateList::Default)]
    pub templates: TemplateList,
    /// Use only the first N templates.
    #[arg(long)]
    pub prompts: Option<usize>,
    /// Style descriptor substituted into the templates (default: the
    /// reference style's).
    #[arg(long)]
    pub style: Option<String>,
}

#[derive(Debug, Args)]
pub struct PoolArgs {
    #[arg(long)]
    pub adapter: PathBuf,
    #[command(flatten)]
    pub prompts: PromptListArgs,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    /// Samples per prompt.
    #[arg(long, default_value_t = 8)]
    pub pool_size: usize,
    #[arg(long)]
    pub pool_id: String,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub pool_id: String,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Items kept per prompt by clip and random.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Chosen item ids for the human strategy.
    #[arg(long, num_args = 1..)]
    pub chosen: Vec<String>,
    #[arg(long)]
    pub annotator: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub replace: bool,
}

#[derive(Debug, Args)]
pub struct RoundArgs {
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[command(flatten)]
    pub prompts: PromptListArgs,
    /// Samples per prompt.
    #[arg(long, default_value_t = 8)]
    pub pool_size: usize,
    /// Items kept per prompt by clip and random.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[command(flatten)]
    pub train: AdapterTrainArgs,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    /// Samples per prompt when measuring each round.
    #[arg(long, default_value_t = 4)]
    pub eval_per_prompt: usize,
    /// Also train round two on the reference pair.
    #[arg(long)]
    pub keep_reference: bool,
    /// Default: `<strategy>-s<seed>`.
    #[arg(long)]
    pub pool_id: Option<String>,
    /// Human strategy: seconds to wait for a selection (default: forever).
    #[arg(long)]
    pub wait_secs: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Adapter to measure; the base model when omitted.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[command(flatten)]
    pub prompts: PromptListArgs,
    #[arg(long, default_value_t = 4)]
    pub per_prompt: usize,
    #[command(flatten)]
    pub guidance: GuidanceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here as JSON as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
