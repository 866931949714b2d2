mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for each failure class.
const EXIT_ARGUMENT: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "cape", version, about = "Probabilistic class activation maps: data, training, explanations and metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic glyph dataset with ground-truth masks.
    SynthData(SynthArgs),
    /// Train from scratch (ts) or post-fit a CAPE head (pf).
    Train(TrainArgs),
    /// Heatmaps and per-region values for the top-k classes.
    Explain(ExplainArgs),
    /// Signed contribution difference between two classes.
    Diff(DiffArgs),
    /// Accuracy table, explanation metrics and attention placement.
    Evaluate(EvaluateArgs),
    /// Merge evaluation runs into one table and a heatmap gallery.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any of the dataset fields; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Standard deviation of the additive pixel noise.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by `synth-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file: `{"training": {...}, "architecture": {...}}`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `ts` or `pf`.
    #[arg(long)]
    mode: Option<String>,
    /// Checkpoint with a trained vanilla classifier (required for pf).
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    teacher_temperature: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    selective_kld: bool,
    #[arg(long)]
    ce_on_cape: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ImageSource {
    /// Image as a CPT1 tensor of shape [H, W, 3].
    #[arg(long, conflicts_with_all = ["data", "index"])]
    image: Option<PathBuf>,
    /// Dataset directory; use with --index.
    #[arg(long, requires = "index")]
    data: Option<PathBuf>,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: ImageSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "cam,cape,mu-cape")]
    kinds: Vec<String>,
    #[arg(long, default_value_t = 2)]
    topk: usize,
    /// Regions below this fraction of the largest value are marked
    /// suppressed in the overlay data.
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct DiffArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: ImageSource,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    c1: usize,
    #[arg(long)]
    c2: usize,
    /// Number of five-region groups listed per sign.
    #[arg(long, default_value_t = 3)]
    groups: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "cam,cape,mu-cape")]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "naive,off-the-shelf,bootstrap")]
    variants: Vec<String>,
    /// Evaluate only the first N images of the split.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories from `evaluate` or `explain`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use cape_core::Error;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => EXIT_ARGUMENT,
                Error::Invariant(_) => EXIT_INVARIANT,
                Error::Io(_) | Error::Format(_) | Error::Json(_) => EXIT_IO,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_ARGUMENT)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Train(a) => commands::train(a),
        Command::Explain(a) => commands::explain(a),
        Command::Diff(a) => commands::diff(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
