//! `pccnn`: mask generation, training, sampling, ranking, evaluation and
//! probability maps for pixel-constrained inpainting models.
//!
//! Exit codes: 0 on success, 1 when the request is invalid (bad flags,
//! mismatched or unreadable inputs), 2 when processing fails.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pccnn_core::CoreError;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "pccnn", version, about = "Pixel-constrained inpainting: train, sample and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a blob mask dataset.
    GenMasks(GenMasksArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Sample inpaintings of one image, sorted by likelihood.
    Sample(SampleArgs),
    /// Rank held-out ground truths among model samples.
    Rank(RankArgs),
    /// Score inpaintings with l1, l2 and pSNR.
    Eval(EvalArgs),
    /// Pixel probability maps as a completion is sampled (binary models).
    Probmap(ProbmapArgs),
    /// Crop, resize and quantize raw 178x218 face photos into a dataset.
    PrepCeleba(PrepCelebaArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct GenMasksArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub max_blobs: usize,
    #[arg(long, default_value_t = 2)]
    pub iter_min: usize,
    #[arg(long, default_value_t = 7)]
    pub iter_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Swap visible and hidden pixels.
    #[arg(long)]
    pub invert: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetArg {
    Mnist,
    MnistSmall,
    Celeba,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// IDX image file (labels alongside) or dataset directory.
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Mask dataset from `gen-masks`.
    #[arg(long)]
    pub masks: std::path::PathBuf,
    #[arg(long, value_enum, default_value_t = PresetArg::Mnist)]
    pub preset: PresetArg,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Images per forward/backward pass within a batch.
    #[arg(long, default_value_t = 8)]
    pub micro_batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use only the first N training images.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also checkpoint every N epochs (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Apply the auxiliary loss to every pixel instead of hidden ones.
    #[arg(long)]
    pub aux_all_pixels: bool,
    /// Resume from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<std::path::PathBuf>,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSpec {
    /// Top half visible.
    Top,
    Bottom,
    Left,
    Right,
    /// A blob mask drawn from `--seed`.
    Blob,
}

#[derive(Args, Debug, Serialize)]
pub struct MaskArgs {
    /// Mask image (>= 128 is visible) or mask dataset file.
    #[arg(long, conflicts_with = "mask_spec")]
    pub mask: Option<std::path::PathBuf>,
    /// Entry of a mask dataset file to use.
    #[arg(long, default_value_t = 0)]
    pub mask_index: usize,
    #[arg(long, value_enum)]
    pub mask_spec: Option<MaskSpec>,
}

#[derive(Args, Debug, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub image: std::path::PathBuf,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[arg(long, default_value_t = 8)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub out_dir: std::path::PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct RankArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mask dataset; blob masks drawn from `--seed` when absent.
    #[arg(long)]
    pub masks: Option<std::path::PathBuf>,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mask dataset; blob masks drawn from `--seed` when absent.
    #[arg(long)]
    pub masks: Option<std::path::PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Per-image CSV rows.
    #[arg(long)]
    pub csv: Option<std::path::PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbmapArgs {
    #[arg(long)]
    pub ckpt: std::path::PathBuf,
    #[arg(long)]
    pub image: std::path::PathBuf,
    #[command(flatten)]
    pub mask: MaskArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Emit a frame after every N sampled pixels.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long)]
    pub out_dir: std::path::PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PrepCelebaArgs {
    /// Directory of raw JPEG or PNG photos.
    #[arg(long)]
    pub input: std::path::PathBuf,
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
}

/// A request the command cannot act on.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return if e.is_input_error() { 1 } else { 2 };
        }
        if cause.is::<UsageError>() {
            return 1;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenMasks(a) => commands::gen_masks(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Rank(a) => commands::rank(a),
        Command::Eval(a) => commands::eval(a),
        Command::Probmap(a) => commands::probmap(a),
        Command::PrepCeleba(a) => commands::prep_celeba(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
