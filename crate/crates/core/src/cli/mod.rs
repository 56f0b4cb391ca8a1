//! Command-line surface.
//!
//! Exit status: 0 success, 1 unexpected I/O failure, 2 config or validation
//! error (including missing input paths), 3 data-format error, 4 numerical
//! error. Errors are printed to stderr as one JSON object.

mod analysis;
mod config;
mod coverage_cmd;
mod output;
mod toy_cmd;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use in2core::coreset::Strategy;
use in2core::influence::{DampingMode, Estimator, Hessian, InfluenceConfig};
use in2core::{Error, Result};

pub use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "in2core", version, about = "Influence-based data attribution, coreset selection and coverage analysis")]
pub struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing. Defaults to the current directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Toy datasets, models, gradients and the leave-one-out oracle.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Rank training examples by influence on the validation set.
    Influence(InfluenceArgs),
    /// Select a coreset from an influence ranking.
    Select(SelectArgs),
    /// Profile first-k layer restrictions against a memory budget.
    LayerBudget(LayerBudgetArgs),
    /// Cache training gradients and score test points against them.
    #[command(subcommand)]
    Coverage(CoverageCommand),
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Generate a seeded dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Write per-example gradients as a manifest.
    Grads(GradsArgs),
    /// Write the finite-difference Hessian of the mean training loss.
    Hessian(HessianArgs),
    /// Leave-one-out retraining deltas.
    Loo(LooArgs),
    /// Write surface embeddings for the similarity baseline.
    Embed(EmbedArgs),
}

#[derive(Debug, Subcommand)]
pub enum CoverageCommand {
    /// Build and write the gradient cache.
    Cache(CacheArgs),
    /// Score test points against a cache.
    Score(ScoreArgs),
    /// Coverage scores against losses, with the similarity baseline.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// `cluster` or `markov`.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub world_seed: Option<u64>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long)]
    pub label_rotation: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Seeds both the model initialisation and the trainer.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub line_search: Option<bool>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub newton_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct GradsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train, validation or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Output file stem; defaults to the split.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub created_at: Option<u64>,
}

#[derive(Debug, Args)]
pub struct HessianArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LooArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    /// Model every retraining starts from.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct EstimatorFlags {
    #[arg(long)]
    pub estimator: Option<Estimator>,
    #[arg(long)]
    pub damping_mode: Option<DampingMode>,
    /// λ for fixed damping and for the exact estimator.
    #[arg(long)]
    pub damping: Option<f64>,
    #[arg(long)]
    pub layer_limit: Option<usize>,
    /// Hessian JSON written by `toy hessian`; needed by the exact estimator.
    #[arg(long)]
    pub hessian: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InfluenceArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Influence CSV from `influence`. Without it, `--train` and `--val` are used.
    #[arg(long)]
    pub influence: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Also emit all four strategies at equal size and their pairwise overlaps.
    #[arg(long)]
    pub compare: bool,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Args)]
pub struct LayerBudgetArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Comma-separated layer counts.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    /// Memory budget in bytes.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub min_rho: Option<f64>,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub subset_seed: Option<u64>,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Output file stem.
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Training manifest, for datainf caches written without one.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub estimator: EstimatorFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long)]
    pub train_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub test_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub length_bias_threshold: Option<f64>,
}

/// Resolved config plus the output directory.
pub struct Ctx {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, out: Option<PathBuf>) -> Result<Self> {
        let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    /// The flag, else the config value; must exist on disk.
    pub fn input(&self, flag: &Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        let p = flag
            .clone()
            .or_else(|| configured.clone())
            .ok_or_else(|| Error::Config(format!("missing --{name} (or inputs.{} in the config)", name.replace('-', "_"))))?;
        if !p.exists() {
            return Err(Error::MissingPath(p));
        }
        Ok(p)
    }

    pub fn optional_input(&self, flag: &Option<PathBuf>, configured: &Option<PathBuf>) -> Result<Option<PathBuf>> {
        match flag.clone().or_else(|| configured.clone()) {
            Some(p) if !p.exists() => Err(Error::MissingPath(p)),
            other => Ok(other),
        }
    }

    pub fn influence_config(&self, flags: &EstimatorFlags) -> InfluenceConfig {
        let c = &self.cfg.influence;
        let d = InfluenceConfig::default();
        InfluenceConfig {
            estimator: flags.estimator.or(c.estimator).unwrap_or(d.estimator),
            damping_mode: flags.damping_mode.or(c.damping_mode).unwrap_or(d.damping_mode),
            damping_value: flags.damping.or(c.damping_value).unwrap_or(d.damping_value),
            layer_limit: flags.layer_limit.or(c.layer_limit),
        }
    }

    pub fn hessian(&self, flags: &EstimatorFlags) -> Result<Option<Hessian>> {
        match self.optional_input(&flags.hessian, &self.cfg.inputs.hessian)? {
            Some(p) => Ok(Some(output::read_hessian(&p)?)),
            None => Ok(None),
        }
    }
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref())?;
    let ctx = Ctx::new(cfg, cli.out)?;
    match cli.command {
        Command::Toy(cmd) => toy_cmd::run(&ctx, cmd),
        Command::Influence(args) => analysis::influence(&ctx, &args),
        Command::Select(args) => analysis::select(&ctx, &args),
        Command::LayerBudget(args) => analysis::layer_budget(&ctx, &args),
        Command::Coverage(cmd) => coverage_cmd::run(&ctx, cmd),
    }
}

/// Caps the rayon pool at `IN2CORE_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("IN2CORE_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("IN2CORE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))
}

/// One-line summary per written artifact.
pub fn announce(path: &Path, what: &str) {
    println!("wrote {} ({what})", path.display());
}
