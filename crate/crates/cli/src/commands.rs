//! Subcommand implementations and the error-to-exit-code policy.
//!
//! Handlers return [`CliError`]: `Validation` (exit 1) for bad flag values,
//! config contradictions, and semantic contract failures; `Io` (exit 2) for
//! missing files, unreadable formats, and corrupt artifacts. All outputs go
//! through [`replace_via_tmp`], so interrupted runs leave no partial files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use tvpr_core::evalkit::{self, FpsConfig};
use tvpr_core::geometry::{GeometryError, Polygon};
use tvpr_core::io::{self, AnnotationInstance, AnnotationRecord, IoError};
use tvpr_core::spotter::{patchify, SpotterConfig, SpotterError, SpotterModel};
use tvpr_core::synthgen::{generate_traversal, SynthError, TraversalConfig};
use tvpr_core::training::{fit, fit_mae, prepare_example, trace_to_csv, TrainConfig, TrainError};
use tvpr_core::types::{Frame, GrayImage, TextInstance};
use tvpr_core::vpr::{build_place_map, query_place, FilterPolicy, MatchResult, VprError};

use crate::{
    BenchArgs, EvalDetArgs, EvalVprArgs, MapArgs, PretrainArgs, QueryArgs, SpotArgs, SynthArgs,
    TrainArgs,
};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Io(_) => "io",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

/// One machine-readable line on stderr, regardless of how deep the failure
/// originated.
pub fn print_error_line(err: &CliError) {
    eprintln!("{}", json!({ "error": { "kind": err.kind(), "message": err.message() } }));
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<VprError> for CliError {
    fn from(e: VprError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<evalkit::EvalError> for CliError {
    fn from(e: evalkit::EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SpotterError> for CliError {
    fn from(e: SpotterError) -> Self {
        match e {
            // Corrupt or truncated checkpoints are artifact problems, not
            // flag problems.
            SpotterError::Checkpoint(inner) => CliError::Io(inner.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

/// Prefix I/O failures with the file they came from; validation messages
/// already name their subject.
fn in_file<T, E: Into<CliError>>(path: &Path, result: Result<T, E>) -> Result<T, CliError> {
    result.map_err(|e| match e.into() {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".tmp");
    PathBuf::from(name)
}

/// Write through a sibling `.tmp` file and rename into place.
fn replace_via_tmp<E>(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<(), E>,
) -> Result<(), CliError>
where
    CliError: From<E>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = tmp_path(path);
    write(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    replace_via_tmp(path, |tmp| fs::write(tmp, bytes))
}

fn pretty_json(value: &Value) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    text.into_bytes()
}

/// All `.pgm` files in `dir`, sorted by file name; ids are the file stems.
fn load_frames(dir: &Path) -> Result<Vec<(String, GrayImage)>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Validation(format!("no .pgm frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for path in paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Io(format!("unreadable file name {}", path.display())))?
            .to_string();
        frames.push((id, in_file(&path, io::read_pgm(&path))?));
    }
    Ok(frames)
}

fn load_model_config(path: Option<&Path>) -> Result<SpotterConfig, CliError> {
    let config = match path {
        Some(p) => in_file(p, fs::read_to_string(p))
            .and_then(|text| in_file(p, serde_json::from_str::<SpotterConfig>(&text)))?,
        None => SpotterConfig::default(),
    };
    config.validate().map_err(CliError::from)?;
    Ok(config)
}

fn check_threshold(threshold: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Validation(format!(
            "threshold {threshold} must lie in [0, 1]"
        )));
    }
    Ok(())
}

/// Annotation records reassembled into frames. Images are not loaded;
/// callers that need pixels read them via `image_path` instead.
fn frames_from_records(records: &[AnnotationRecord]) -> Result<Vec<Frame>, CliError> {
    records
        .iter()
        .map(|rec| {
            Ok(Frame {
                id: rec.frame_id.clone(),
                image: GrayImage::new(0, 0),
                instances: rec.instances()?,
            })
        })
        .collect()
}

fn default_trace_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".trace.csv");
    PathBuf::from(name)
}

/// Write one traversal half: `frames/<id>.pgm` plus `annotations.jsonl`
/// whose image paths are relative to the half's directory.
fn write_split(dir: &Path, frames: &[Frame]) -> Result<(), CliError> {
    let mut records = Vec::with_capacity(frames.len());
    for frame in frames {
        let rel = format!("frames/{}.pgm", frame.id);
        replace_via_tmp(&dir.join(&rel), |tmp| io::write_pgm(&frame.image, tmp))?;
        records.push(AnnotationRecord::from_frame(frame, &rel));
    }
    replace_via_tmp(&dir.join("annotations.jsonl"), |tmp| io::write_annotations(&records, tmp))
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let config = TraversalConfig {
        n_places: args.places,
        words_per_place: args.words_per_place,
        query_perturbation: args.perturbation,
        drop_rate: args.drop_rate,
        canvas: (args.canvas, args.canvas),
    };
    let pair = generate_traversal(&config, args.seed)?;
    write_split(&args.out.join("map"), &pair.map_frames)?;
    write_split(&args.out.join("query"), &pair.query_frames)?;
    let ids = |frames: &[Frame]| frames.iter().map(|f| f.id.clone()).collect::<Vec<_>>();
    let truth = json!({
        "format": "tvpr-truth",
        "version": 1,
        "seed": args.seed,
        "config": {
            "n_places": config.n_places,
            "words_per_place": config.words_per_place,
            "query_perturbation": config.query_perturbation,
            "drop_rate": config.drop_rate,
            "canvas": [config.canvas.0, config.canvas.1],
        },
        "map_frames": ids(&pair.map_frames),
        "query_frames": ids(&pair.query_frames),
        "correspondence": pair.correspondence,
    });
    write_atomic(&args.out.join("truth.json"), &pretty_json(&truth))
}

pub fn pretrain(args: &PretrainArgs) -> Result<(), CliError> {
    let config = load_model_config(args.config.as_deref())?;
    let mut model = SpotterModel::new(config, args.seed)?;
    let size = model.config.image_size;
    let mut tokens = Vec::new();
    for (id, image) in load_frames(&args.frames)? {
        if image.width != size || image.height != size {
            return Err(CliError::Validation(format!(
                "frame {id} is {}x{}, expected {size}x{size}",
                image.width, image.height
            )));
        }
        tokens.push(patchify(&image, model.config.patch_size)?);
    }
    let train = TrainConfig {
        learning_rate: args.learning_rate,
        steps: args.steps,
        batch_size: args.batch_size,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let trace = fit_mae(&mut model, &tokens, &train)?;
    replace_via_tmp(&args.out, |tmp| model.save(tmp))?;
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &trace {
        csv.push_str(&format!("{step},{loss}\n"));
    }
    let trace_path = args.trace.clone().unwrap_or_else(|| default_trace_path(&args.out));
    write_atomic(&trace_path, csv.as_bytes())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut model = match (&args.init, &args.config) {
        (Some(_), Some(_)) => {
            return Err(CliError::Validation(
                "pass either --config or --init, not both; checkpoints carry their config".into(),
            ));
        }
        (Some(init), None) => in_file(init, SpotterModel::load(init))?,
        (None, config) => {
            SpotterModel::new(load_model_config(config.as_deref())?, args.seed)?
        }
    };
    let records = in_file(&args.annotations, io::read_annotations(&args.annotations))?;
    let base = args.annotations.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut dataset = Vec::with_capacity(records.len());
    for rec in &records {
        let image_path = base.join(&rec.image_path);
        let frame = Frame {
            id: rec.frame_id.clone(),
            image: in_file(&image_path, io::read_pgm(&image_path))?,
            instances: rec.instances()?,
        };
        dataset.push(prepare_example(&frame, &model.config)?);
    }
    let train = TrainConfig {
        learning_rate: args.learning_rate,
        steps: args.steps,
        batch_size: args.batch_size,
        lambda_cls: args.lambda_cls,
        lambda_poly: args.lambda_poly,
        lambda_char: args.lambda_char,
        seed: args.seed,
    };
    let trace = fit(&mut model, &dataset, &train)?;
    replace_via_tmp(&args.out, |tmp| model.save(tmp))?;
    let trace_path = args.trace.clone().unwrap_or_else(|| default_trace_path(&args.out));
    write_atomic(&trace_path, trace_to_csv(&trace).as_bytes())
}

pub fn spot(args: &SpotArgs) -> Result<(), CliError> {
    check_threshold(args.threshold)?;
    let model = in_file(&args.model, SpotterModel::load(&args.model))?;
    let mut records = Vec::new();
    for (id, image) in load_frames(&args.frames)? {
        let instances = tvpr_core::spotter::spot(&model, &image, args.threshold)?;
        records.push(AnnotationRecord {
            frame_id: id.clone(),
            image_path: format!("{id}.pgm"),
            instances: instances.iter().map(AnnotationInstance::from_text_instance).collect(),
        });
    }
    replace_via_tmp(&args.out, |tmp| io::write_annotations(&records, tmp))
}

pub fn build_map(args: &MapArgs) -> Result<(), CliError> {
    let records = in_file(&args.annotations, io::read_annotations(&args.annotations))?;
    let frames = frames_from_records(&records)?;
    let policy = FilterPolicy {
        min_confidence: args.min_confidence,
        min_length: args.min_length,
        min_alnum_fraction: args.min_alnum,
    };
    let map = build_place_map(&frames, &policy)?;
    replace_via_tmp(&args.out, |tmp| io::save_place_map(&map, tmp))
}

pub fn query(args: &QueryArgs) -> Result<(), CliError> {
    let map = in_file(&args.map, io::load_place_map(&args.map))?;
    let records = in_file(&args.annotations, io::read_annotations(&args.annotations))?;
    let mut lines = String::new();
    for frame in frames_from_records(&records)? {
        let result = query_place(&map, &frame, args.threshold)?;
        lines.push_str(&serde_json::to_string(&result)?);
        lines.push('\n');
    }
    write_atomic(&args.out, lines.as_bytes())
}

/// Group records by frame id; duplicate ids are rejected upstream by the
/// annotation reader. Degenerate polygons are kept rather than rejected —
/// the scoring protocol counts them against the side that produced them, so
/// an under-trained spotter's output is still evaluable.
fn instances_by_frame(
    records: &[AnnotationRecord],
) -> Result<BTreeMap<String, Vec<TextInstance>>, CliError> {
    records
        .iter()
        .map(|rec| {
            let instances = rec
                .instances
                .iter()
                .map(|a| {
                    let polygon = Polygon::new(a.polygon.clone()).map_err(|e| {
                        CliError::Io(format!("frame {:?}: {e}", rec.frame_id))
                    })?;
                    Ok(TextInstance::new(polygon, a.text.clone(), a.confidence))
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            Ok((rec.frame_id.clone(), instances))
        })
        .collect()
}

fn eval_report(args: &EvalDetArgs, end_to_end: bool) -> Result<(), CliError> {
    check_threshold(args.iou)?;
    let preds = instances_by_frame(&in_file(&args.pred, io::read_annotations(&args.pred))?)?;
    let truths = instances_by_frame(&in_file(&args.truth, io::read_annotations(&args.truth))?)?;
    let empty: Vec<TextInstance> = Vec::new();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let mut ids: Vec<&String> = preds.keys().chain(truths.keys()).collect();
    ids.sort();
    ids.dedup();
    for id in ids {
        let p = preds.get(id).unwrap_or(&empty);
        let t = truths.get(id).unwrap_or(&empty);
        let r = if end_to_end {
            evalkit::eval_end2end(p, t, args.iou)
        } else {
            evalkit::eval_detection(p, t, args.iou)
        };
        tp += r.true_positives;
        fp += r.false_positives;
        fn_ += r.false_negatives;
    }
    let report = evalkit::report_from_counts(tp, fp, fn_);
    let summary = evalkit::detection_summary(
        &report,
        json!({
            "protocol": if end_to_end { "end2end" } else { "detection" },
            "iou_threshold": args.iou,
        }),
    );
    write_atomic(&args.out, &pretty_json(&summary))
}

pub fn eval_detection(args: &EvalDetArgs) -> Result<(), CliError> {
    eval_report(args, false)
}

pub fn eval_e2e(args: &EvalDetArgs) -> Result<(), CliError> {
    eval_report(args, true)
}

/// Ground-truth sidecar written by `synth`.
#[derive(Debug, Deserialize)]
struct TruthDoc {
    format: String,
    #[allow(dead_code)]
    version: u32,
    map_frames: Vec<String>,
    query_frames: Vec<String>,
    correspondence: Vec<Option<usize>>,
}

fn read_match_results(path: &Path) -> Result<Vec<MatchResult>, CliError> {
    let text = in_file(path, fs::read_to_string(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| in_file(path, serde_json::from_str::<MatchResult>(l)))
        .collect()
}

pub fn eval_vpr(args: &EvalVprArgs) -> Result<(), CliError> {
    let doc: TruthDoc = in_file(&args.truth, fs::read_to_string(&args.truth))
        .and_then(|text| in_file(&args.truth, serde_json::from_str(&text)))?;
    if doc.format != "tvpr-truth" {
        return Err(CliError::Io(format!(
            "{}: unrecognized truth format {:?}",
            args.truth.display(),
            doc.format
        )));
    }
    let results = read_match_results(&args.pred)?;
    let by_id: BTreeMap<&str, &MatchResult> =
        results.iter().map(|r| (r.query_id.as_str(), r)).collect();
    if by_id.len() != results.len() {
        return Err(CliError::Validation("duplicate query_id in match results".into()));
    }
    let ordered: Vec<MatchResult> = doc
        .query_frames
        .iter()
        .map(|id| {
            by_id.get(id.as_str()).map(|&r| r.clone()).ok_or_else(|| {
                CliError::Validation(format!("no match result for query {id:?}"))
            })
        })
        .collect::<Result<_, _>>()?;
    if results.len() != doc.query_frames.len() {
        return Err(CliError::Validation(format!(
            "{} match results for {} ground-truth queries",
            results.len(),
            doc.query_frames.len()
        )));
    }
    let outcomes = evalkit::vpr_outcomes(&ordered, &doc.map_frames, &doc.correspondence)?;
    let curve = evalkit::eval_vpr(&outcomes, args.tolerance)?;
    write_atomic(&args.out_csv, evalkit::pr_curve_to_csv(&curve).as_bytes())?;
    let summary = evalkit::vpr_summary(
        &curve,
        json!({
            "pred": args.pred.display().to_string(),
            "truth": args.truth.display().to_string(),
            "queries": outcomes.len(),
        }),
    );
    write_atomic(&args.out_json, &pretty_json(&summary))?;
    if let Some(svg) = &args.out_svg {
        write_atomic(svg, evalkit::pr_curve_to_svg(&curve).as_bytes())?;
    }
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    check_threshold(args.threshold)?;
    let model = in_file(&args.model, SpotterModel::load(&args.model))?;
    let images: Vec<GrayImage> =
        load_frames(&args.frames)?.into_iter().map(|(_, img)| img).collect();
    let delay = Duration::from_millis(args.sleep_ms);
    let config = FpsConfig { warmup: args.warmup, trials: args.trials };
    let fps = evalkit::measure_fps(
        |image| {
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
            tvpr_core::spotter::spot(&model, image, args.threshold)
        },
        &images,
        &config,
    )?;
    let report = json!({
        "fps": fps,
        "frames": images.len(),
        "warmup": args.warmup,
        "trials": args.trials,
        "sleep_ms": args.sleep_ms,
        "threshold": args.threshold,
    });
    write_atomic(&args.out, &pretty_json(&report))
}
