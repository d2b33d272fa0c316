use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpdit::frame_attention::MaskVariant;
use gpdit::schedule::Parameterization;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "gpdit", version, about = "Frame-autoregressive diffusion transformer: train, generate, probe, bench, verify")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the commands that read a run configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration; defaults are used for anything missing.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides every seed in the configuration.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Attention variant: of (vanilla) or of2 (lightweight).
    #[arg(long)]
    pub variant: Option<MaskVariant>,
    /// Prediction target: eps or companion.
    #[arg(long)]
    pub param: Option<Parameterization>,
    /// Arithmetic precision, 32 or 64.
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Dataset file to use instead of generating synthetic videos.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; with --paired, train both variants from one init.
    Train {
        #[command(flatten)]
        common: Common,
        /// Optimiser steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Train of and of2 from identical init and data order.
        #[arg(long)]
        paired: bool,
    },
    /// Roll out frames from a checkpoint, conditioned on dataset prefixes.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Frames to generate per video.
        #[arg(long)]
        frames: Option<usize>,
        /// Classifier-free guidance scale.
        #[arg(long)]
        guidance: Option<f64>,
        /// Denoising steps per frame.
        #[arg(long)]
        steps: Option<usize>,
        /// Context frames taken from each video.
        #[arg(long, default_value_t = 5)]
        context_frames: usize,
        /// Number of videos to roll out.
        #[arg(long, default_value_t = 16)]
        videos: usize,
        /// Also dump every frame of the first video as a graymap.
        #[arg(long)]
        pgm: bool,
    },
    /// Linear-probe pooled features of a checkpoint (or a fresh init).
    Probe {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to probe; omitted means a randomly initialised model.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated 1-based layers; default all.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        /// Number of videos; default from the configuration.
        #[arg(long)]
        videos: Option<usize>,
    },
    /// Attention pair counts, multiply-adds, cache size and timing.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated frame counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        frames: Vec<usize>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        /// Negative control: corrupt the mask used by the causality check.
        #[arg(long, hide = true)]
        corrupt_mask: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, steps, lr, paired } => commands::train(&common, steps, lr, paired),
        Command::Generate { common, checkpoint, frames, guidance, steps, context_frames, videos, pgm } => {
            commands::generate(&common, &commands::GenerateArgs { checkpoint, frames, guidance, steps, context_frames, videos, pgm })
        }
        Command::Probe { common, checkpoint, layers, videos } => commands::probe(&common, checkpoint.as_deref(), layers, videos),
        Command::Bench { common, frames } => commands::bench(&common, &frames),
        Command::Verify { corrupt_mask } => commands::verify(corrupt_mask),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
