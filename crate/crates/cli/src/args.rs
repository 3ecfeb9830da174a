use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "vaex", version, about = "Visual counterfactual auditing of image classifiers")]
pub struct Cli {
    /// Plain-text `key = value` configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Data root holding the dataset and published artifacts
    /// [default: $VAEX_DATA_DIR, else ./data].
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,

    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    pub log: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic sprite corpus and its train/val/test split.
    Dataset(DatasetArgs),
    /// Train the classifier under audit.
    TrainClassifier(ClassifierArgs),
    /// Store the classifier's probabilities for every sample.
    CacheProbs(CacheArgs),
    /// Train the conditional hierarchical VAE.
    Train(TrainArgs),
    /// Held-out reconstruction, success-rate and FID metrics.
    Eval(EvalArgs),
    /// Counterfactual grids over a list of r values.
    Counterfactual(CounterfactualArgs),
    /// Run the HTTP audit service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; becomes the data root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Train, validation and test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ClassifierArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate factor per epoch.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub free_bits: Option<f64>,
    /// Lower bound of the tracked per-pixel variance.
    #[arg(long)]
    pub pixel_var_floor: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parameter initialization seed [default: the training seed].
    #[arg(long)]
    pub init_seed: Option<u64>,
    /// `desk` (32×32) or `tiny` (8×8).
    #[arg(long)]
    pub preset: Option<String>,
    /// `adain` or `concat`.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    All,
    Mse,
    Fid,
    Success,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub metric: Metric,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Images per side in FID computations.
    #[arg(long)]
    pub fid_max: Option<usize>,
    /// Comma-separated r values for the success table.
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CounterfactualArgs {
    /// Sample ids (repeat or comma-separate); default: the whole `--split`.
    #[arg(long, value_delimiter = ',')]
    pub id: Vec<String>,
    /// Target class [default: the class after the classifier's prediction].
    #[arg(long)]
    pub target: Option<usize>,
    /// Comma-separated r values.
    #[arg(long)]
    pub r: Option<String>,
    /// Directory for `<id>_sweep.png` and `sweep.tsv`.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// `condition_only` or `condition_plus_top_latent`.
    #[arg(long)]
    pub intervention: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub split: Option<String>,
    /// Browser origin allowed by CORS [default: any].
    #[arg(long)]
    pub origin: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
}
