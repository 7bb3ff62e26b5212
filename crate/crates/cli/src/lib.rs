//! Command-line front end: synthetic data, decomposition, training,
//! prediction, evaluation and cross-validation.

pub mod config;
pub mod manifest;
pub mod synth;

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::UsageError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "vesselseg",
    version,
    about = "Retinal vessel segmentation with a wavelet-input FCN"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus of vessel-like images with a manifest.
    Synth(SynthArgs),
    /// Write the normalized input channels of one image as 16-bit planes.
    Decompose(DecomposeArgs),
    /// Train a model on every image of a manifest.
    Train(TrainArgs),
    /// Segment images with a trained model.
    Predict(PredictArgs),
    /// Score saved predictions against the references of a manifest.
    Evaluate(EvaluateArgs),
    /// Stratified k-fold cross-validation with a fresh model per fold.
    Crossval(CrossvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[arg(long)]
    image: PathBuf,
    /// FOV mask; the whole frame when omitted.
    #[arg(long)]
    fov: Option<PathBuf>,
    /// Channel set: 1, 4d1, 4d2 or 7.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct TrainOpts {
    /// Architecture file of `key = value` lines.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Channel set: 1, 4d1, 4d2 or 7.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// rotations, none, oversample or elastic.
    #[arg(long)]
    augment: Option<String>,
    /// Keep the four rotations of each patch adjacent when shuffling.
    #[arg(long)]
    consecutive_rotations: bool,
    /// spatial or standard.
    #[arg(long)]
    dropout: Option<String>,
    /// Original patches sampled per training image.
    #[arg(long)]
    patches_per_image: Option<usize>,
    /// Also save the model every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Arithmetic used for training and inference: f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

impl TrainOpts {
    fn into_flags(self) -> config::TrainFlags {
        config::TrainFlags {
            arch: self.arch,
            channels: self.channels,
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            augment: self.augment,
            consecutive_rotations: self.consecutive_rotations,
            dropout: self.dropout,
            patches_per_image: self.patches_per_image,
            checkpoint_every: self.checkpoint_every,
            precision: self.precision,
        }
    }
}

#[derive(Debug, Args)]
struct PredictOpts {
    /// simple or multiple.
    #[arg(long)]
    mode: Option<String>,
    /// Vessel probability at or above which a pixel is labelled vessel.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Images to segment; alternatively a single `--image`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, conflicts_with = "manifest")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    fov: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Channel set, when the model file does not record one.
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[command(flatten)]
    predict: PredictOpts,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory holding `<name>_prob.pgm` and `<name>_seg.pgm` per image.
    #[arg(long)]
    predictions: PathBuf,
    /// Second prediction directory compared with a paired Wilcoxon test.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    train: TrainOpts,
    #[command(flatten)]
    predict: PredictOpts,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl From<UsageError> for CliError {
    fn from(e: UsageError) -> Self {
        CliError::Usage(e.0)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<UsageError>() {
            Ok(u) => CliError::Usage(u.0),
            Err(e) => CliError::Data(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, S>(argv: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        if e.use_stderr() {
            CliError::Usage(e.render().to_string())
        } else {
            // --help / --version
            print!("{}", e.render());
            CliError::Usage(String::new())
        }
    });
    let cli = match cli {
        Ok(c) => c,
        Err(CliError::Usage(msg)) if msg.is_empty() => return Ok(()),
        Err(e) => return Err(e),
    };
    commands::execute(cli.command)
}

/// Runs the command line and returns the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    match run(argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("{}", msg.trim_end()),
                CliError::Data(err) => eprintln!("error: {err:#}"),
            }
            e.exit_code()
        }
    }
}
