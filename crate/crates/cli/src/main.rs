mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use urocnn::arch::{ArchError, Backbone};
use urocnn::dataset::DatasetError;
use urocnn::metrics::MetricsError;
use urocnn::trainer::{Scenario, TrainError};

use crate::config::ConfigError;

/// Urological lesion classifiers: synthetic data, two-step transfer
/// learning, evaluation, Grad-CAM and reports.
///
/// Settings come from command-line flags, then the `--config` TOML file,
/// then built-in defaults. Progress goes to stderr; results only to files.
#[derive(Parser, Debug)]
#[command(name = "urocnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic endoscopy dataset (images, manifest, ground truth).
    Generate(GenerateArgs),
    /// Run the training scenarios and write an experiment bundle.
    Train(TrainArgs),
    /// Score a manifest with a checkpoint and write scores and ROC.
    Eval(EvalArgs),
    /// Grad-CAM heatmap and overlay for one image.
    Gradcam(GradcamArgs),
    /// AUC tables and ROC plots from an experiment bundle.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Output directory (relative paths honor UROCNN_OUTPUT_ROOT).
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    /// Images per procedure × modality × label cell.
    #[arg(long)]
    per_cell: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    arch: Vec<Backbone>,
    #[arg(long, value_delimiter = ',')]
    scenario: Vec<Scenario>,
    #[arg(long)]
    scale: Option<f64>,
    /// Square network input side.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    warm_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    /// Independent runs trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    /// Start checkpoint instead of random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    opacity: Option<f64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Experiment bundle directory written by `train`.
    #[arg(long)]
    bundle: PathBuf,
}

/// Exit status per failure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Failure {
    Other = 1,
    Config = 2,
    MissingInput = 3,
    Checkpoint = 4,
    IncompleteBundle = 5,
}

impl Failure {
    fn as_str(self) -> &'static str {
        match self {
            Failure::Other => "other",
            Failure::Config => "config",
            Failure::MissingInput => "missing_input",
            Failure::Checkpoint => "checkpoint",
            Failure::IncompleteBundle => "incomplete_bundle",
        }
    }
}

fn is_not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

fn classify_arch(e: &ArchError) -> Failure {
    match e {
        ArchError::Io { source, .. } if is_not_found(source) => Failure::MissingInput,
        ArchError::InvalidScale(_) | ArchError::Resolution { .. } => Failure::Config,
        _ => Failure::Checkpoint,
    }
}

fn classify_dataset(e: &DatasetError) -> Failure {
    match e {
        DatasetError::Io { source, .. } if is_not_found(source) => Failure::MissingInput,
        DatasetError::MissingFile { .. } => Failure::MissingInput,
        _ => Failure::Other,
    }
}

fn classify(err: &anyhow::Error) -> Failure {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return Failure::Config;
        }
        if let Some(e) = cause.downcast_ref::<ArchError>() {
            return classify_arch(e);
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return classify_dataset(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            match e {
                MetricsError::IncompleteBundle(_) => return Failure::IncompleteBundle,
                MetricsError::Dataset(d) => return classify_dataset(d),
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            match e {
                TrainError::Config(_) => return Failure::Config,
                TrainError::Io { source, .. } if is_not_found(source) => return Failure::MissingInput,
                TrainError::MissingDomain(_) => return Failure::MissingInput,
                TrainError::Bundle { .. } => return Failure::IncompleteBundle,
                TrainError::Arch(a) => return classify_arch(a),
                TrainError::Dataset(d) => return classify_dataset(d),
                _ => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if is_not_found(e) {
                return Failure::MissingInput;
            }
        }
    }
    Failure::Other
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcam(a) => commands::gradcam(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = classify(&err);
            let line = serde_json::json!({
                "error": kind.as_str(),
                "code": kind as u8,
                "message": format!("{err:#}"),
            });
            eprintln!("{line}");
            ExitCode::from(kind as u8)
        }
    }
}
