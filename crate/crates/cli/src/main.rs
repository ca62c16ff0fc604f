//! `tvpr` — pipeline driver: synthesize traversals, pretrain/train the
//! spotter, run inference, build and query place maps, and score the
//! results.
//!
//! Every subcommand is a pure function of its inputs, flags, and seed;
//! outputs are written to a temporary file and renamed into place so a
//! failed run never leaves partial artifacts. Errors print one
//! machine-readable JSON line on stderr; exit codes are 0 (success),
//! 1 (validation), 2 (I/O or parse).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "tvpr", version, about = "Text-based visual place recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic map/query traversal with ground truth.
    Synth(SynthArgs),
    /// Masked-autoencoder pretraining of the spotter backbone.
    Pretrain(PretrainArgs),
    /// Set-prediction training of the full spotter.
    Train(TrainArgs),
    /// Run the spotter over frames, writing predicted annotations.
    Spot(SpotArgs),
    /// Build a place map from annotations.
    Map(MapArgs),
    /// Resolve query annotations against a place map.
    Query(QueryArgs),
    /// Score predictions: detection, end-to-end, or place recognition.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Measure spotter throughput in frames per second.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of places (map frames).
    #[arg(long, default_value_t = 16)]
    places: usize,
    /// Words rendered per place.
    #[arg(long, default_value_t = 2)]
    words_per_place: usize,
    /// Query jitter magnitude; 0 duplicates map frames pixel-for-pixel.
    #[arg(long, default_value_t = 0.3)]
    perturbation: f64,
    /// Fraction of queries replaced by distractor places.
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 128)]
    canvas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Directory of PGM frames sized to the model's input.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model architecture JSON; defaults to the toy configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Ground-truth annotations JSONL; image paths resolve relative to it.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 2.0)]
    lambda_cls: f64,
    #[arg(long, default_value_t = 5.0)]
    lambda_poly: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_char: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model architecture JSON; mutually exclusive with --init.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Warm-start checkpoint (e.g. from `pretrain`).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SpotArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory of PGM frames.
    #[arg(long)]
    frames: PathBuf,
    /// Text-probability threshold for keeping a query.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Predicted annotations JSONL to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MapArgs {
    /// Annotations JSONL, one record per map frame, in traversal order.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    min_confidence: f64,
    #[arg(long, default_value_t = 3)]
    min_length: usize,
    #[arg(long, default_value_t = 1.0)]
    min_alnum: f64,
    /// Place-map JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    /// Place-map JSON from `map`.
    #[arg(long)]
    map: PathBuf,
    /// Query annotations JSONL.
    #[arg(long)]
    annotations: PathBuf,
    /// Acceptance threshold on the match score.
    #[arg(long, default_value_t = 0.25)]
    threshold: f64,
    /// Match results JSONL to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EvalCommand {
    /// Detection precision/recall/H-mean at an IoU threshold.
    Detection(EvalDetArgs),
    /// End-to-end F: detection plus exact case-folded transcription.
    E2e(EvalDetArgs),
    /// Place-recognition precision-recall sweep.
    Vpr(EvalVprArgs),
}

#[derive(Args, Debug)]
struct EvalDetArgs {
    /// Predicted annotations JSONL.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth annotations JSONL.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Report JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalVprArgs {
    /// Match results JSONL from `query`.
    #[arg(long)]
    pred: PathBuf,
    /// Traversal truth JSON from `synth`.
    #[arg(long)]
    truth: PathBuf,
    /// Correctness window in frames.
    #[arg(long, default_value_t = 3)]
    tolerance: usize,
    /// Sweep points CSV to write.
    #[arg(long)]
    out_csv: PathBuf,
    /// Summary JSON to write.
    #[arg(long)]
    out_json: PathBuf,
    /// Optional PR curve SVG.
    #[arg(long)]
    out_svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Directory of PGM frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    trials: usize,
    /// Artificial per-frame delay, for overhead sensitivity checks.
    #[arg(long, default_value_t = 0)]
    sleep_ms: u64,
    /// Benchmark report JSON to write.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            commands::print_error_line(&CliError::Validation(format!("{}", e.kind())));
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Spot(a) => commands::spot(&a),
        Command::Map(a) => commands::build_map(&a),
        Command::Query(a) => commands::query(&a),
        Command::Eval(EvalCommand::Detection(a)) => commands::eval_detection(&a),
        Command::Eval(EvalCommand::E2e(a)) => commands::eval_e2e(&a),
        Command::Eval(EvalCommand::Vpr(a)) => commands::eval_vpr(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            commands::print_error_line(&err);
            ExitCode::from(err.exit_code())
        }
    }
}
