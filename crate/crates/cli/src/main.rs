//! `fforge`: building footprint pipeline driver.
//!
//! Exit status is 0 on success, 1 on validation errors (including bad flags)
//! and 2 on I/O errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fforge", version, about = "Building footprint extraction pipeline")]
pub struct Cli {
    /// TOML file with per-stage settings
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-image and per-sample parallelism
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Run every stage on the calling thread
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-band statistics of the training images
    Stats(StatsArgs),
    /// Clip and min-max normalize every image with saved statistics
    Preprocess(PreprocessArgs),
    /// Signed-distance label rasters from the footprint CSV
    Label(LabelArgs),
    /// Cut a raster into the nine overlapping tiles
    Tile(TileArgs),
    /// Train one model variant
    Train(TrainArgs),
    /// Predict probability rasters at the original resolution
    Predict(PredictArgs),
    /// Average the predictions of several variants
    Ensemble(EnsembleArgs),
    /// Extract footprint polygons from predictions
    Polygonize(PolygonizeArgs),
    /// Score predicted footprints against ground truth
    Score(ScoreArgs),
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Split a manifest into train, validation and test sets
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct SubsetArgs {
    /// Split file restricting which images are processed
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which part of the split to use
    #[arg(long, value_parser = ["train", "val", "test", "all"], default_value = "all")]
    pub subset: String,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Statistics are pooled over the training part of this split
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// Raster header to slice
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = ["v1", "v2", "v3"])]
    pub variant: String,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Directory written by `preprocess`
    #[arg(long)]
    pub prep: PathBuf,
    /// Directory written by `label`
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `train`
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub prep: PathBuf,
    #[command(flatten)]
    pub subset: SubsetArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Prediction directories, one per variant
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PolygonizeArgs {
    /// Directory of prediction rasters
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_area: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f32>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Predicted footprints CSV
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth footprints CSV
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub city: String,
    /// Recorded in the report; filtering happens in `polygonize`
    #[arg(long)]
    pub min_area: Option<f64>,
    #[arg(long)]
    pub iou: Option<f64>,
    /// Manifest giving each image's raster size
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Raster size used when no manifest is given
    #[arg(long, default_value_t = 650)]
    pub size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 650)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    /// Fraction of each scene covered by buildings
    #[arg(long, default_value_t = 0.12)]
    pub density: f64,
    #[arg(long, default_value_t = 8)]
    pub min_side: usize,
    #[arg(long, default_value_t = 24)]
    pub max_side: usize,
    #[arg(long, default_value = "synth")]
    pub city: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fforge::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
