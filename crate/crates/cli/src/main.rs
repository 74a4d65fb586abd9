//! `dacnet`: one binary for every stage of the pipeline.
//!
//! ```text
//! dacnet prepare-splits --metadata Data_Entry_2017.csv --seed 17
//! dacnet train --recipe dacnet --data-dir data/
//! dacnet tune-thresholds --checkpoint runs/dacnet/<ts>/best.ckpt --data-dir data/ --out thresholds.json
//! dacnet evaluate --checkpoint runs/dacnet/<ts>/best.ckpt --data-dir data/ --thresholds thresholds.json
//! dacnet explain --checkpoint best.ckpt --image 00000001_000.png --disease top1 --out cam.png
//! dacnet serve --checkpoint best.ckpt --thresholds thresholds.json --port 8080
//! dacnet stats --metadata Data_Entry_2017.csv
//! ```

mod commands;
mod stamp;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dacnet_core::dataset::SplitRatios;
use dacnet_core::Split;

#[derive(Parser, Debug)]
#[command(name = "dacnet", version, about = "Multi-label chest X-ray classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the images, metadata and split manifest live.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Image directory, searched recursively
    #[arg(long)]
    pub data_dir: PathBuf,

    /// Metadata CSV [default: <data-dir>/Data_Entry_2017.csv]
    #[arg(long)]
    pub metadata: Option<PathBuf>,

    /// Split manifest from prepare-splits [default: <data-dir>/splits.tsv]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a patient-disjoint, stratified train/val/test manifest
    PrepareSplits {
        #[arg(long)]
        metadata: PathBuf,

        /// Output manifest [default: splits.tsv beside the metadata file]
        #[arg(long)]
        out: Option<PathBuf>,

        #[arg(long, default_value_t = dacnet_core::recipe::DEFAULT_SEED)]
        seed: u64,

        /// Train,val,test fractions
        #[arg(long, default_value_t = SplitRatios::default())]
        ratios: SplitRatios,
    },

    /// Train a recipe (a preset name or a TOML file)
    Train {
        /// replicate_chexnet, dacnet, vit_transformer, tiny_smoke, or a path
        #[arg(long, required_unless_present = "resume")]
        recipe: Option<String>,

        #[command(flatten)]
        data: DataArgs,

        /// Override the recipe seed
        #[arg(long)]
        seed: Option<u64>,

        /// Override the epoch budget
        #[arg(long)]
        max_epochs: Option<usize>,

        #[arg(long, default_value = "runs")]
        run_root: PathBuf,

        /// Pretrained backbone weights [default: $DACNET_WEIGHTS_DIR or ~/.cache/dacnet/weights]
        #[arg(long)]
        weights_dir: Option<PathBuf>,

        /// Continue from a checkpoint in its run directory
        #[arg(long)]
        resume: Option<PathBuf>,
    },

    /// Fit per-disease F1-maximizing thresholds on a split
    TuneThresholds {
        #[arg(long)]
        checkpoint: PathBuf,

        #[command(flatten)]
        data: DataArgs,

        #[arg(long, default_value_t = Split::Val)]
        split: Split,

        #[arg(long)]
        out: PathBuf,

        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },

    /// Per-disease AUC and F1 on a split
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,

        #[command(flatten)]
        data: DataArgs,

        #[arg(long, default_value_t = Split::Test)]
        split: Split,

        /// Threshold file from tune-thresholds, or one number for every disease
        #[arg(long, default_value = "0.5")]
        thresholds: String,

        /// Report JSON [default: eval_<split>.json beside the checkpoint]
        #[arg(long)]
        out: Option<PathBuf>,

        /// Also write per-image scores as CSV
        #[arg(long)]
        predictions: Option<PathBuf>,

        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },

    /// Grad-CAM overlay for one image
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,

        #[arg(long)]
        image: PathBuf,

        /// Disease name, or top1 for the most probable finding
        #[arg(long, default_value = "top1")]
        disease: String,

        #[arg(long)]
        out: PathBuf,
    },

    /// Run the HTTP inference service
    Serve {
        #[arg(long, env = "DACNET_CHECKPOINT")]
        checkpoint: PathBuf,

        #[arg(long, env = "DACNET_THRESHOLDS")]
        thresholds: Option<PathBuf>,

        #[arg(long, env = "DACNET_PORT", default_value_t = 8080)]
        port: u16,

        #[arg(long, env = "DACNET_HOST", default_value = "127.0.0.1")]
        host: String,
    },

    /// Label-combination frequency table
    Stats {
        #[arg(long)]
        metadata: PathBuf,

        /// Rows to print (all when omitted)
        #[arg(long)]
        top: Option<usize>,
    },

    /// Side-by-side per-disease AUC of several evaluation reports
    Compare {
        /// Report JSON from evaluate; repeat for more columns
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,

        /// Include the published CheXNet AUCs as the first column
        #[arg(long)]
        baseline: bool,

        #[arg(long, value_enum, default_value_t = commands::Format::Text)]
        format: commands::Format,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Write a small synthetic dataset (tile-pattern images) for smoke runs
    Synth {
        #[arg(long)]
        out: PathBuf,

        #[arg(long, default_value_t = 200)]
        patients: usize,

        #[arg(long, default_value_t = 3)]
        max_images: usize,

        #[arg(long, default_value_t = dacnet_core::recipe::DEFAULT_SEED)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
