use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(
    name = "kneemark",
    version,
    about = "Knee radiograph landmark localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knee corpus with annotations.csv
    GenPhantom(GenPhantomArgs),
    /// Train the joint-centre (ROI) model
    TrainRoi(TrainArgs),
    /// Train the 16-landmark model
    TrainLandmarks(TrainLandmarksArgs),
    /// Run two-stage inference over the images of an annotation CSV
    Infer(InferArgs),
    /// Score predictions against annotations
    Evaluate(EvaluateArgs),
    /// Train and score every configuration of an ablation grid
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenPhantomArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// phantom.count
    #[arg(long)]
    count: Option<usize>,
    /// phantom.seed
    #[arg(long)]
    seed: Option<u64>,
    /// phantom.bilateral
    #[arg(long)]
    bilateral: bool,
    /// phantom.side, pixels per knee
    #[arg(long)]
    side: Option<usize>,
    /// phantom.spacing_mm
    #[arg(long)]
    spacing: Option<f64>,
}

/// Options shared by every training command. Each flag overrides the config
/// key named in its help text.
#[derive(Args, Clone)]
struct TrainArgs {
    /// Annotation CSV; image paths are relative to it
    #[arg(long)]
    annotations: PathBuf,
    /// Checkpoint directory for the selected epoch
    #[arg(long)]
    out: PathBuf,
    /// History CSV [default: <out>/history.csv]
    #[arg(long)]
    history: Option<PathBuf>,
    /// Run configuration document
    #[arg(long)]
    config: Option<PathBuf>,
    /// train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// train.lr
    #[arg(long)]
    lr: Option<f64>,
    /// train.batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// train.weight_decay
    #[arg(long)]
    weight_decay: Option<f64>,
    /// train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// train.eval_unit
    #[arg(long, value_parser = ["mm", "px"])]
    eval_unit: Option<String>,
    /// model.width
    #[arg(long)]
    width: Option<usize>,
    /// model.depth
    #[arg(long)]
    depth: Option<usize>,
    /// model.input_size
    #[arg(long)]
    input_size: Option<usize>,
    /// model.dropout
    #[arg(long)]
    dropout: Option<f64>,
    /// model.block
    #[arg(long, value_parser = ["hmp", "bottleneck"])]
    block: Option<String>,
    /// loss.kind
    #[arg(long, value_parser = ["l1", "l2", "elastic", "wing"])]
    loss: Option<String>,
    /// mixup.alpha
    #[arg(long)]
    mixup_alpha: Option<f64>,
    /// mixup.enabled = off
    #[arg(long)]
    no_mixup: bool,
    /// Turns every augmentation off, ignoring augment.* keys
    #[arg(long)]
    no_augment: bool,
    /// cv.folds; 0 trains on every record
    #[arg(long)]
    folds: Option<usize>,
    /// cv.fold, the validation fold
    #[arg(long)]
    fold: Option<usize>,
    /// pipeline.roi_spacing
    #[arg(long)]
    roi_spacing: Option<f64>,
    /// pipeline.landmark_spacing
    #[arg(long)]
    landmark_spacing: Option<f64>,
    /// pipeline.crop_mm
    #[arg(long)]
    crop_mm: Option<f64>,
    /// Print one line per epoch to stderr
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct TrainLandmarksArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// ROI checkpoint whose weights initialise everything but the head
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// pipeline.roi_checkpoint
    #[arg(long)]
    roi: Option<PathBuf>,
    /// pipeline.landmark_checkpoint
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// pipeline.input, an annotation CSV listing the images
    #[arg(long)]
    input: Option<PathBuf>,
    /// pipeline.output, the predictions CSV
    #[arg(long)]
    out: Option<PathBuf>,
    /// pipeline.stages
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stages: Option<u8>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// pipeline.roi_spacing
    #[arg(long)]
    roi_spacing: Option<f64>,
    /// pipeline.landmark_spacing
    #[arg(long)]
    landmark_spacing: Option<f64>,
    /// pipeline.crop_mm
    #[arg(long)]
    crop_mm: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// ablation, test, all or ids joined by `+`
    #[arg(long, default_value = "ablation")]
    subset: String,
    /// Dataset name in the report [default: annotation file stem]
    #[arg(long)]
    dataset: Option<String>,
    /// Report mean and std over patient-level folds
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Cumulative error distribution CSV over the subset
    #[arg(long)]
    cdf: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    Table,
    Full,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, value_enum, default_value = "table")]
    grid: Grid,
    /// List the configurations without training
    #[arg(long)]
    dry_run: bool,
    /// ROI checkpoint for fine-tuning rows
    #[arg(long)]
    pretrained: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenPhantom(a) => commands::gen_phantom(&a),
        Command::TrainRoi(a) => commands::train_roi(&a),
        Command::TrainLandmarks(a) => commands::train_landmarks(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain() {
                let text = cause.to_string();
                if !msg.ends_with(&text) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&text);
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
