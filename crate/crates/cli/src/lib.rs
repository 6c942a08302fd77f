//! Command-line front end: phantoms, preprocessing, training, inference,
//! ensembling, evaluation, splits and gradient checks.

mod commands;
mod config;
mod montage;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{RunConfig, SplitConfig};
pub use montage::{export_slices, render_slices};

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 3.
    Config(String),
    /// Exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "error[config]: {m}"),
            CliError::Runtime(e) => write!(f, "error[runtime]: {e:#}"),
        }
    }
}

impl From<seunet::Error> for CliError {
    fn from(e: seunet::Error) -> Self {
        match e {
            seunet::Error::Config(m) => CliError::Config(m),
            e => CliError::Runtime(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "seunet", version, about = "SE-normalized U-Net for PET/CT tumour segmentation")]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic PET/CT/GTV cases and a manifest.
    Phantom {
        #[arg(long, default_value_t = 4)]
        cases: usize,
        /// Field of view in mm per axis, a multiple of 16.
        #[arg(long)]
        extent: Option<usize>,
        #[arg(long)]
        lesions: Option<usize>,
        /// Number of acquisition centres the cases are spread over.
        #[arg(long, default_value_t = 1)]
        centers: usize,
    },
    /// Resample to isotropic spacing and normalize CT.
    Preprocess {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Fold file written by `split`.
        #[arg(long, requires = "fold")]
        splits: Option<PathBuf>,
        /// Fold name inside the split file.
        #[arg(long)]
        fold: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict masks with one checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Also write PNG slice montages.
        #[arg(long)]
        png: bool,
    },
    /// Predict masks by averaging several checkpoints.
    Ensemble {
        /// Member checkpoints (default: `ensemble.checkpoints`).
        #[arg(long, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        png: bool,
    },
    /// Score predicted masks against the ground truth.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory holding `<case>_mask.nii.gz` files.
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Build cross-validation folds.
    Split {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Print the default configuration as JSON.
    Defaults,
}

/// Runs a parsed command line with the config and flag overrides applied.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.train.sampler.rng_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    commands::dispatch(cli, cfg)
}
