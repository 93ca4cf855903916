use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{CorpusArgs, LensArgs, ModelArgs, SampleArgs, SizeArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "geocond", version, about = "Geometry-conditioned pattern generation")]
pub struct Cli {
    /// Base seed of every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with defaults for any option; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "GEOCOND_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a conditioning field as a CFD1 file.
    #[command(subcommand)]
    Field(FieldCommand),
    /// Distort an image through a lens or a stored warp field.
    Warp {
        #[arg(long)]
        input: PathBuf,
        /// Warp field (2 channels). Without it the lens flags are used.
        #[arg(long)]
        field: Option<PathBuf>,
        #[command(flatten)]
        lens: LensArgs,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the covered-pixel mask.
        #[arg(long)]
        coverage_out: Option<PathBuf>,
    },
    /// Map a distorted image back to the rectified frame.
    Unwarp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output size; defaults to the image size.
        #[command(flatten)]
        size: SizeArgs,
        #[arg(long)]
        coverage_out: Option<PathBuf>,
    },
    /// Content density of a warp field.
    Density {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pullback metric (g11, g22, g12, dist) of a warp field.
    Metric {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a denoiser on a procedural corpus.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint (its model settings win).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print the mean loss every this many steps.
        #[arg(long, default_value_t = 100)]
        log_every: usize,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Generate images from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Warp field to condition on (2 channels).
        #[arg(long, conflicts_with = "sphere")]
        field: Option<PathBuf>,
        /// Condition on the equirectangular sphere parametrization.
        #[arg(long)]
        sphere: bool,
        /// Size of lens and sphere conditioning; defaults to the model
        /// resolution (sphere: resolution x 2 resolution).
        #[command(flatten)]
        size: SizeArgs,
        #[command(flatten)]
        lens: LensArgs,
        #[command(flatten)]
        sample: SampleArgs,
        /// Drop the attention density shift (ablation).
        #[arg(long)]
        no_reweight: bool,
        /// Sample with the raw weights instead of their moving average.
        #[arg(long)]
        raw_weights: bool,
    },
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Attention duplication and metric consistency checks.
    Selftest {
        /// Random attention cases.
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum FieldCommand {
    /// Backward map of a Brown-Conrady lens.
    Lens {
        #[command(flatten)]
        lens: LensArgs,
        #[command(flatten)]
        size: SizeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Equirectangular sphere coordinates (u, v).
    SpherePos {
        #[command(flatten)]
        size: SizeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sphere metric (g11, g22, g12, dist) with optional density.
    SphereMetric {
        #[command(flatten)]
        size: SizeArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        density_out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Write distorted training samples with their fields.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Training progress the warp schedule is evaluated at.
        #[arg(long, default_value_t = 0.0)]
        progress: f64,
        /// positional or metric; decides the stored pack.
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Recover the lens of a generated pattern and compare it with the
    /// conditioning.
    Fidelity {
        #[arg(long)]
        input: PathBuf,
        /// Pattern family the image was generated from.
        #[arg(long)]
        family: String,
        /// Conditioning warp field of the image.
        #[arg(long)]
        field: Option<PathBuf>,
        /// Manually distorted control image of the same content.
        #[arg(long)]
        control: Option<PathBuf>,
        /// Expected k1, checked to 10%.
        #[arg(long, allow_negative_numbers = true)]
        expect_k1: Option<f64>,
    },
}
