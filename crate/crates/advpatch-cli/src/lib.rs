//! Command-line surface of the advpatch toolkit.
//!
//! Every flag can also come from a JSON config file (`--config`, keys in
//! kebab-case mirroring the flags); explicit flags win over config values.
//! Exit codes: 0 success, 2 usage errors, 3 missing backend capability,
//! 1 anything else.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

mod commands;

pub use commands::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "advpatch",
    version,
    about = "Train and evaluate universal adversarial patches against image-text encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic prototype dataset (and optional videos) for the toy backends
    Synth(SynthArgs),
    /// Train a patch on a class-per-directory dataset
    Train(TrainArgs),
    /// Evaluate a patch on a dataset and stream records to JSON-lines
    Eval(EvalArgs),
    /// Per-image PGD / FGSM baseline attack
    #[command(name = "baseline-pgd")]
    BaselinePgd(PgdArgs),
    /// Score a patch against videos over infection fractions
    #[command(name = "attack-video")]
    AttackVideo(VideoArgs),
    /// Emit CSV tables and SVG plots from result files
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeArg {
    Square,
    Frame,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSelectionArg {
    Random,
    Prefix,
}

#[derive(Args, Debug, Default)]
pub struct SynthArgs {
    /// JSON config file mirroring these flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of classes (drawn from the builtin label list)
    #[arg(long)]
    classes: Option<usize>,
    /// Explicit comma-separated labels (overrides --classes)
    #[arg(long)]
    labels: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Square image side in pixels
    #[arg(long)]
    side: Option<usize>,
    /// Uniform pixel noise amplitude around the class prototype
    #[arg(long)]
    noise: Option<f64>,
    /// Prototype seed; must match the toy-aligned backend seed
    #[arg(long)]
    seed: Option<u64>,
    /// Also generate this many videos per class under <out>-videos/
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    video_frames: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct SynthConfig {
    out: Option<PathBuf>,
    classes: Option<usize>,
    labels: Option<String>,
    per_class: Option<usize>,
    side: Option<usize>,
    noise: Option<f64>,
    seed: Option<u64>,
    videos: Option<usize>,
    video_frames: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON config file mirroring these flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model backend id (builtin: toy, toy-aligned, toy-d<D>-s<S>, ...)
    #[arg(long)]
    model: Option<String>,
    /// Dataset root (class-per-directory layout)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Target class label
    #[arg(long)]
    target: Option<String>,
    /// Square patch side in pixels
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, value_enum)]
    shape: Option<ShapeArg>,
    /// Ring width for frame-shaped patches
    #[arg(long)]
    frame_width: Option<usize>,
    /// Resize every ingested image to this side (required for frame patches
    /// on mixed-size datasets)
    #[arg(long)]
    ingest_resize: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Enable the crop-resize augmentation update
    #[arg(long)]
    crop_aug: bool,
    /// Augmentation strength
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt template with one {} slot for the label
    #[arg(long)]
    prompt_template: Option<String>,
    /// Output patch artifact path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training history JSON path (default: <out stem>.history.json)
    #[arg(long)]
    history_out: Option<PathBuf>,
    /// Write a patch checkpoint here after every epoch
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Backend registry config JSON
    #[arg(long)]
    backends: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct TrainConfigFile {
    model: Option<String>,
    data: Option<PathBuf>,
    target: Option<String>,
    size: Option<usize>,
    shape: Option<ShapeArg>,
    frame_width: Option<usize>,
    ingest_resize: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    crop_aug: Option<bool>,
    beta: Option<f64>,
    val_fraction: Option<f64>,
    seed: Option<u64>,
    prompt_template: Option<String>,
    out: Option<PathBuf>,
    history_out: Option<PathBuf>,
    checkpoint_dir: Option<PathBuf>,
    backends: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    /// JSON config file mirroring these flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Patch artifact to evaluate
    #[arg(long)]
    patch: Option<PathBuf>,
    /// Evaluate a rendered text patch instead of an artifact
    #[arg(long)]
    text: Option<String>,
    /// Area fraction for --text
    #[arg(long)]
    area: Option<f64>,
    /// Evaluate a control patch built from this image file
    #[arg(long)]
    patch_image: Option<PathBuf>,
    /// Side for the --patch-image control patch
    #[arg(long)]
    size: Option<usize>,
    /// Model backend id (default: the artifact's model)
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Target class label (default: the artifact's target)
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated top-k list, e.g. "1,5"
    #[arg(long)]
    topk: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    ingest_resize: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt template with one {} slot for the label
    #[arg(long)]
    prompt_template: Option<String>,
    /// Attacked-record JSON-lines output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Clean-record JSON-lines output (default: <out stem>.clean.jsonl)
    #[arg(long)]
    clean_out: Option<PathBuf>,
    /// Metric summary JSON output (default: <out stem>.summary.json)
    #[arg(long)]
    summary_out: Option<PathBuf>,
    #[arg(long)]
    backends: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct EvalConfigFile {
    patch: Option<PathBuf>,
    text: Option<String>,
    area: Option<f64>,
    patch_image: Option<PathBuf>,
    size: Option<usize>,
    model: Option<String>,
    data: Option<PathBuf>,
    split: Option<SplitArg>,
    val_fraction: Option<f64>,
    target: Option<String>,
    topk: Option<String>,
    repeats: Option<usize>,
    ingest_resize: Option<usize>,
    seed: Option<u64>,
    prompt_template: Option<String>,
    out: Option<PathBuf>,
    clean_out: Option<PathBuf>,
    summary_out: Option<PathBuf>,
    backends: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct PgdArgs {
    /// JSON config file mirroring these flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    target: Option<String>,
    /// L-infinity budget
    #[arg(long)]
    eps: Option<f64>,
    /// Step size
    #[arg(long)]
    alpha: Option<f64>,
    /// Iteration count (1 = FGSM)
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    topk: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Prompt template with one {} slot for the label
    #[arg(long)]
    prompt_template: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    summary_out: Option<PathBuf>,
    #[arg(long)]
    backends: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct PgdConfigFile {
    model: Option<String>,
    data: Option<PathBuf>,
    split: Option<SplitArg>,
    val_fraction: Option<f64>,
    target: Option<String>,
    eps: Option<f64>,
    alpha: Option<f64>,
    steps: Option<usize>,
    topk: Option<String>,
    seed: Option<u64>,
    prompt_template: Option<String>,
    out: Option<PathBuf>,
    summary_out: Option<PathBuf>,
    backends: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct VideoArgs {
    /// JSON config file mirroring these flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patch: Option<PathBuf>,
    /// Directory of per-video frame folders
    #[arg(long)]
    videos: Option<PathBuf>,
    /// Captions manifest JSON (id -> caption)
    #[arg(long)]
    captions: Option<PathBuf>,
    /// Comma-separated infection fractions, e.g. "0,0.2,0.4,0.6,0.8,1"
    #[arg(long)]
    fractions: Option<String>,
    /// Model backend id (default: the artifact's model)
    #[arg(long)]
    model: Option<String>,
    /// Keyframes per video
    #[arg(long)]
    keyframes: Option<usize>,
    /// Attacked-frame selection: random sample or prefix
    #[arg(long, value_enum)]
    frame_selection: Option<FrameSelectionArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Curve JSON output
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    backends: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct VideoConfigFile {
    patch: Option<PathBuf>,
    videos: Option<PathBuf>,
    captions: Option<PathBuf>,
    fractions: Option<String>,
    model: Option<String>,
    keyframes: Option<usize>,
    frame_selection: Option<FrameSelectionArg>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    backends: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct ReportArgs {
    /// JSON config file mirroring these flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attacked-record JSON-lines input
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Clean-record JSON-lines input (default: sibling .clean.jsonl if present)
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long)]
    topk: Option<String>,
    /// Video curve JSON input
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Training history JSON input
    #[arg(long)]
    history: Option<PathBuf>,
    /// Report output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct ReportConfigFile {
    #[serde(rename = "in")]
    input: Option<PathBuf>,
    clean: Option<PathBuf>,
    topk: Option<String>,
    curve: Option<PathBuf>,
    history: Option<PathBuf>,
    out: Option<PathBuf>,
}

/// Run the CLI against an argv vector (including the program name) and
/// return the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests print to stdout and exit cleanly.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(args) => commands::run_synth(args),
        Command::Train(args) => commands::run_train(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::BaselinePgd(args) => commands::run_pgd(args),
        Command::AttackVideo(args) => commands::run_video(args),
        Command::Report(args) => commands::run_report(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
