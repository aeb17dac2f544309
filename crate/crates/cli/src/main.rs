mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cscpr", version, about = "RGB-D place recognition: datasets, retrieval, reranking and evaluation")]
struct Cli {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run seed; copied into every seeded component.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a labelled manifest from scene directories or a synthetic pack.
    GenDataset(GenDatasetArgs),
    /// Write the global descriptor of one cloud.
    Extract(ExtractArgs),
    /// Rank the keyframes of a manifest against a query cloud.
    Retrieve(RetrieveArgs),
    /// Retrieve, then rerank the head of the list.
    Rerank(RerankArgs),
    /// Recall@k over every query of a manifest.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences on seeded toy instances.
    GradCheck(GradCheckArgs),
    /// Train the reranking head on the bundled pair set.
    ToyTrain(ToyTrainArgs),
    /// Run quick property checks on built-in synthetic data.
    Selftest,
}

#[derive(Args, Debug)]
pub struct LabelFlags {
    /// Keep a database frame once its overlap with the last kept one drops below this.
    #[arg(long)]
    pub t_c: Option<f64>,
    /// A database frame is a positive when its overlap is strictly above this.
    #[arg(long)]
    pub t_p: Option<f64>,
    /// A database frame is a negative when its overlap is at or below this.
    #[arg(long)]
    pub t_n: Option<f64>,
    /// Voxel size for overlap computation, metres.
    #[arg(long)]
    pub voxel: Option<f64>,
    /// Most negatives recorded per query.
    #[arg(long)]
    pub negative_cap: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenDatasetArgs {
    /// Root holding one directory per scene, each with a sequence.json.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub scenes: Option<PathBuf>,
    /// Render this many synthetic rooms instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Frames per synthetic room.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Render rigid-copy pairs (this many views per room) instead of a trajectory;
    /// every frame is kept as a database frame.
    #[arg(long, requires = "synthetic")]
    pub rigid: Option<usize>,
    /// Fraction of points jittered in each rigid copy.
    #[arg(long, default_value_t = 0.1)]
    pub noise_fraction: f64,
    /// Standard deviation of the jitter, metres.
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f64,
    /// Where synthetic clouds are written (default: next to the manifest).
    #[arg(long)]
    pub pack_dir: Option<PathBuf>,
    #[command(flatten)]
    pub labels: LabelFlags,
    /// Split label written into the manifest.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Manifest path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct WeightsFlag {
    /// Model weights; seeded initial weights when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Point cloud (.pcb).
    #[arg(long)]
    pub cloud: PathBuf,
    #[command(flatten)]
    pub weights: WeightsFlag,
    /// Descriptor JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Manifest whose keyframes form the database.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Query point cloud (.pcb).
    #[arg(long)]
    pub query: PathBuf,
    #[command(flatten)]
    pub weights: WeightsFlag,
    /// Candidates to return.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Ranked list JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerankArgs {
    #[command(flatten)]
    pub retrieve: RetrieveArgs,
    /// cscc or kabsch.
    #[arg(long, default_value = "cscc")]
    pub reranker: String,
    /// Head of the list that is reranked.
    #[arg(long)]
    pub top_r: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Manifest to evaluate.
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub weights: WeightsFlag,
    /// none, cscc or kabsch.
    #[arg(long)]
    pub reranker: Option<String>,
    /// extractor or oracle.
    #[arg(long)]
    pub descriptors: Option<String>,
    /// scene or global.
    #[arg(long)]
    pub scope: Option<String>,
    /// Candidates retrieved per query.
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Head of the list that is reranked.
    #[arg(long)]
    pub top_r: Option<usize>,
    /// Recall cut-offs (repeatable).
    #[arg(long = "k")]
    pub ks: Vec<usize>,
    /// RANSAC iterations for the kabsch reranker.
    #[arg(long)]
    pub ransac_iterations: Option<usize>,
    /// Inlier distance for the kabsch reranker, metres.
    #[arg(long)]
    pub inlier_threshold: Option<f64>,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct ToyTrainArgs {
    /// Optimisation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial learning rate of the cosine schedule.
    #[arg(long)]
    pub lr_max: Option<f64>,
    /// Final learning rate of the cosine schedule.
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Loss trajectory CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the trained weights here.
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
}

/// Exit codes: 1 validation or usage, 2 I/O or file format, 3 numeric.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cscpr::Error>() {
            return match e {
                cscpr::Error::Io { .. } | cscpr::Error::Format { .. } => 2,
                cscpr::Error::Numeric(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<commands::CheckFailed>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    match cli.command {
        Command::GenDataset(a) => commands::gen_dataset(cfg, a),
        Command::Extract(a) => commands::extract(cfg, a),
        Command::Retrieve(a) => commands::retrieve(cfg, a),
        Command::Rerank(a) => commands::rerank(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::GradCheck(a) => commands::grad_check(cfg, a),
        Command::ToyTrain(a) => commands::toy_train(cfg, a),
        Command::Selftest => selftest::run(cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
