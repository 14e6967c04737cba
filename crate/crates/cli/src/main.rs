use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

use movietour::annotate::{self, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use movietour::checkpoint::load_checkpoint;
use movietour::corpus::{scan_directory, stratified_split, CorpusManifest, Split, MANIFEST_FILE};
use movietour::curate::{build_corpus, UrlManifest};
use movietour::model::{Classifier, ModelParams};
use movietour::trainer::{self, TrainConfig};
use movietour::{
    AnnotateError, CheckpointError, CorpusError, LabelMap, TensorError, TrainError,
};

/// Recognise tourist destinations in images and caption frame sequences.
#[derive(Parser)]
#[command(name = "movietour", version)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or validate an image corpus.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model on a split corpus.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Caption a sequence of timestamped frames.
    Annotate(AnnotateArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Download, deduplicate and store the images listed in a URL manifest.
    Build(BuildArgs),
    /// Scan a corpus directory, split it and write manifest.jsonl.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct BuildArgs {
    /// CSV with header `class,url,license`.
    #[arg(long)]
    manifest: PathBuf,
    /// Corpus directory to create or extend.
    #[arg(long)]
    out: PathBuf,
    /// JSON label map; defaults to the 14 built-in destinations.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Corpus directory with one subdirectory per class.
    dir: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.8,0.1,0.1", value_parser = parse_ratios)]
    ratios: [f64; 3],
    /// Seed for the per-class shuffle.
    #[arg(long)]
    seed: u64,
    /// JSON label map; defaults to the 14 built-in destinations.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory holding a split manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// `key = value` training config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory holding a split manifest.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// PNG or JPEG image.
    image: PathBuf,
    /// Number of ranked classes to report.
    #[arg(long, default_value_t = 3)]
    topk: usize,
    /// JSON label map; defaults to the 14 built-in destinations.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct AnnotateArgs {
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Directory of `NNNNNNNN.jpg` frames (milliseconds) or a `<ms>\t<path>` list file.
    #[arg(long)]
    frames: PathBuf,
    /// Frames below this confidence become unknown.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Odd smoothing window, in frames.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Output file; `.srt` or `.json` picks the format.
    #[arg(long)]
    out: PathBuf,
    /// JSON label map; defaults to the 14 built-in destinations.
    #[arg(long)]
    labels: Option<PathBuf>,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected three ratios, got {}", v.len()))
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const DIVERGED: u8 = 3;
const IO: u8 = 4;

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let code = match e {
            CorpusError::Io { .. } => IO,
            _ => DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io(_) => IO,
            _ => DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Failure::new(USAGE, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Usage(_) => Failure::new(USAGE, e.to_string()),
            TrainError::Divergence { .. } => Failure::new(DIVERGED, e.to_string()),
            TrainError::Io { .. } => Failure::new(IO, e.to_string()),
            TrainError::Tensor(e) => e.into(),
            TrainError::Corpus(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
        }
    }
}

impl From<AnnotateError> for Failure {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Input(_) => Failure::new(USAGE, e.to_string()),
            AnnotateError::NonMonotone { .. } | AnnotateError::NoFrames(_) | AnnotateError::Json(_) => {
                Failure::new(DATA, e.to_string())
            }
            AnnotateError::Io { .. } => Failure::new(IO, e.to_string()),
            AnnotateError::Tensor(e) => e.into(),
            AnnotateError::Corpus(e) => e.into(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(IO, format!("{}: {e}", path.display()))
}

fn emit(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values serialise"));
}

fn load_labels(path: Option<&Path>) -> Result<LabelMap, Failure> {
    let Some(path) = path else {
        return Ok(LabelMap::default());
    };
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::new(DATA, format!("label map {}: {e}", path.display())))
}

fn load_manifest(dir: &Path) -> Result<CorpusManifest, Failure> {
    let path = dir.join(MANIFEST_FILE);
    let manifest = CorpusManifest::read_jsonl(&path)?;
    if !manifest.is_split() {
        return Err(Failure::new(
            DATA,
            format!("{} is not split; run `movietour dataset validate` first", path.display()),
        ));
    }
    Ok(manifest)
}

fn load_model(path: &Path, labels: &LabelMap) -> Result<ModelParams<f32>, Failure> {
    let model = load_checkpoint(path)?;
    if model.num_classes() != labels.len() {
        return Err(Failure::new(
            USAGE,
            format!(
                "checkpoint has {} classes but the label map has {}",
                model.num_classes(),
                labels.len()
            ),
        ));
    }
    Ok(model)
}

fn dataset_build(args: BuildArgs) -> Result<(), Failure> {
    let labels = load_labels(args.labels.as_deref())?;
    let urls = UrlManifest::from_path(&args.manifest)?;
    let report = build_corpus(&urls, &labels, &args.out)?;
    for failure in &report.failures {
        warn!("{failure}");
    }
    let totals = report.totals();
    info!(
        "stored {} of {} rows ({} duplicate, {} undecodable, {} failed)",
        totals.stored,
        urls.rows.len(),
        totals.rejected_duplicate,
        totals.rejected_undecodable,
        totals.failed
    );
    emit(&serde_json::to_value(&report).expect("report serialises"));
    Ok(())
}

fn dataset_validate(args: ValidateArgs) -> Result<(), Failure> {
    let labels = load_labels(args.labels.as_deref())?;
    let scan = scan_directory(&args.dir, &labels)?;
    for s in &scan.skipped {
        warn!("skipping {}: {}", s.path.display(), s.reason);
    }
    for d in &scan.duplicates {
        warn!("skipping {}: duplicate of {}", d.path.display(), d.kept);
    }
    for c in &scan.empty_classes {
        warn!("class {c:?} has no images");
    }
    let manifest = stratified_split(&scan.manifest, args.ratios, args.seed)?;
    let path = args.dir.join(MANIFEST_FILE);
    manifest.write_jsonl(&path)?;

    let per_split: Vec<Vec<usize>> = Split::ALL
        .iter()
        .map(|&s| manifest.class_counts(Some(s)))
        .collect();
    let classes: Vec<Value> = labels
        .entries()
        .iter()
        .map(|e| {
            info!(
                "{:<28} {:>6} {:>6} {:>6}",
                e.name, per_split[0][e.index], per_split[1][e.index], per_split[2][e.index]
            );
            json!({
                "class": e.name,
                "train": per_split[0][e.index],
                "val": per_split[1][e.index],
                "test": per_split[2][e.index],
            })
        })
        .collect();
    emit(&json!({
        "manifest": path,
        "records": manifest.records.len(),
        "skipped": scan.skipped.len(),
        "duplicates": scan.duplicates.len(),
        "empty_classes": scan.empty_classes,
        "classes": classes,
    }));
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let config = TrainConfig::from_path(&args.config)?;
    let manifest = load_manifest(&args.data)?;
    let params = ModelParams::init(config.architecture(manifest.labels.len()), config.seed)?;
    info!(
        "training {} parameters for {} epochs on {} images",
        params.param_count(),
        config.epochs,
        manifest.records_in(Split::Train).len()
    );
    let outcome = trainer::train(params, &manifest, &config)?;
    let last = outcome.history.last().expect("at least one epoch");
    emit(&json!({
        "checkpoint": outcome.best_checkpoint,
        "history": config.history_path(),
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": outcome.best_val_accuracy,
        "final_train_loss": last.train_loss,
        "final_val_accuracy": last.val_accuracy,
    }));
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let manifest = load_manifest(&args.data)?;
    let model = load_model(&args.model, &manifest.labels)?;
    let m = trainer::evaluate(&model, &manifest, args.split)?;
    let names: Vec<&str> = manifest.labels.entries().iter().map(|e| e.name.as_str()).collect();
    emit(&json!({
        "split": args.split,
        "count": m.count,
        "loss": m.loss,
        "accuracy": m.accuracy,
        "labels": names,
        "confusion": m.confusion,
    }));
    Ok(())
}

fn predict(args: PredictArgs) -> Result<(), Failure> {
    let labels = load_labels(args.labels.as_deref())?;
    let model = load_model(&args.model, &labels)?;
    let p = annotate::predict_image(&model, &args.image, args.topk)?;
    let topk: Vec<Value> = p
        .topk
        .iter()
        .map(|&(i, prob)| {
            json!({
                "index": i,
                "label": labels.name(i),
                "country": labels.country(i),
                "probability": prob,
            })
        })
        .collect();
    emit(&json!({ "image": args.image, "topk": topk }));
    Ok(())
}

enum Format {
    Srt,
    Json,
}

fn annotate_cmd(args: AnnotateArgs) -> Result<(), Failure> {
    let ext = args.out.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let format = match ext.as_deref() {
        Some("srt") => Format::Srt,
        Some("json") => Format::Json,
        _ => {
            return Err(Failure::new(
                USAGE,
                format!("--out must end in .srt or .json, got {}", args.out.display()),
            ))
        }
    };
    let labels = load_labels(args.labels.as_deref())?;
    let model = load_model(&args.model, &labels)?;
    let frames = annotate::read_frames(&args.frames)?;
    info!("annotating {} frames", frames.len());
    let track = annotate::annotate_frames(&model, &labels, &frames, args.threshold, args.window)?;
    let text = match format {
        Format::Srt => annotate::emit_srt(&track, &labels),
        Format::Json => annotate::emit_json(&track, &labels),
    };
    fs::write(&args.out, text).map_err(|e| io_failure(&args.out, e))?;
    info!("wrote {} captions to {}", track.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Dataset(DatasetCommand::Build(a)) => dataset_build(a),
        Command::Dataset(DatasetCommand::Validate(a)) => dataset_validate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Annotate(a) => annotate_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
