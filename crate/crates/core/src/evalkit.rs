//! Metrics: detection precision/recall/H-mean, end-to-end F, place-match
//! precision-recall sweeps, and wall-clock FPS.
//!
//! Detection follows the ICDAR-style greedy protocol: predictions in
//! descending confidence order each claim the best still-unmatched truth at
//! IoU ≥ threshold. The end-to-end variant re-checks each claimed pair's
//! transcription (case-folded), so its F can only fall below the detection
//! H-mean. Place-match curves sweep the acceptance threshold over every
//! observed score; precision-at-recall readouts use max-precision
//! interpolation, recorded in the summary header.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::geometry::polygon_iou;
use crate::types::{GrayImage, TextInstance};
use crate::vpr::MatchResult;

/// Recall levels reported in summaries.
pub const RECALL_POINTS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 0.9];

/// Interpolation convention for precision-at-recall readouts.
pub const INTERPOLATION: &str = "max-precision";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn hmean(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Build a report from raw counts.
pub fn report_from_counts(tp: usize, fp: usize, fn_: usize) -> DetectionReport {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    DetectionReport {
        precision,
        recall,
        hmean: hmean(precision, recall),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

/// Greedy confidence-ordered matching shared by both detection metrics.
/// Returns matched (pred, truth) index pairs; everything else on either
/// side is FP / FN. Invalid polygons never match.
fn match_pairs(
    preds: &[TextInstance],
    truths: &[TextInstance],
    iou_threshold: f64,
) -> Vec<(usize, usize)> {
    let pred_ok: Vec<bool> = preds.iter().map(|p| p.polygon.validate().is_ok()).collect();
    let truth_ok: Vec<bool> = truths.iter().map(|t| t.polygon.validate().is_ok()).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .partial_cmp(&preds[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; truths.len()];
    let mut pairs = Vec::new();
    for &p in &order {
        if !pred_ok[p] {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if claimed[t] || !truth_ok[t] {
                continue;
            }
            let iou = polygon_iou(&preds[p].polygon, &truth.polygon).unwrap_or(0.0);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((t, iou));
            }
        }
        if let Some((t, _)) = best {
            claimed[t] = true;
            pairs.push((p, t));
        }
    }
    pairs
}

/// Detection precision/recall/H-mean at one IoU threshold.
pub fn eval_detection(
    preds: &[TextInstance],
    truths: &[TextInstance],
    iou_threshold: f64,
) -> DetectionReport {
    let pairs = match_pairs(preds, truths, iou_threshold);
    let tp = pairs.len();
    report_from_counts(tp, preds.len() - tp, truths.len() - tp)
}

/// Case-folded transcription used for end-to-end comparison.
pub fn normalize_text(text: &str) -> String {
    text.chars().flat_map(char::to_uppercase).collect()
}

/// End-to-end spotting: a detection-matched pair counts only if the
/// transcriptions agree after case folding. The returned `hmean` is the
/// end-to-end F-measure.
pub fn eval_end2end(
    preds: &[TextInstance],
    truths: &[TextInstance],
    iou_threshold: f64,
) -> DetectionReport {
    let pairs = match_pairs(preds, truths, iou_threshold);
    let tp = pairs
        .iter()
        .filter(|&&(p, t)| normalize_text(&preds[p].text) == normalize_text(&truths[t].text))
        .count();
    report_from_counts(tp, preds.len() - tp, truths.len() - tp)
}

/// One query's retrieval outcome: the matcher's score and proposed map
/// index, plus the ground-truth map index (None for queries whose place
/// was dropped from the map).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VprOutcome {
    pub score: f64,
    pub proposed: Option<usize>,
    pub truth: Option<usize>,
}

/// Pair match results with ground truth, translating proposed frame ids to
/// map indices via `map_order`.
pub fn vpr_outcomes(
    results: &[MatchResult],
    map_order: &[String],
    truth: &[Option<usize>],
) -> Result<Vec<VprOutcome>, EvalError> {
    if results.len() != truth.len() {
        return Err(EvalError::Contract(format!(
            "{} results for {} ground-truth entries",
            results.len(),
            truth.len()
        )));
    }
    results
        .iter()
        .zip(truth)
        .map(|(r, &t)| {
            let proposed = match &r.best_frame_id {
                None => None,
                Some(id) => Some(map_order.iter().position(|m| m == id).ok_or_else(|| {
                    EvalError::Contract(format!(
                        "proposed frame {id:?} for query {:?} is not in the map",
                        r.query_id
                    ))
                })?),
            };
            Ok(VprOutcome { score: r.score, proposed, truth: t })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Threshold sweep over a retrieval run. `points` is ordered by strictly
/// descending threshold; `precision_at_recall` pairs each of
/// [`RECALL_POINTS`] with the interpolated precision there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub precision_at_recall: Vec<(f64, f64)>,
    pub frame_tolerance: usize,
}

impl PRCurve {
    /// Max precision over sweep points with recall ≥ `recall`; 0 if the
    /// sweep never reaches that recall.
    pub fn interpolated_precision(&self, recall: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.recall >= recall)
            .map(|p| p.precision)
            .fold(0.0, f64::max)
    }
}

/// Is the proposed index within `tolerance` frames of the truth?
fn is_correct(outcome: &VprOutcome, tolerance: usize) -> bool {
    match (outcome.proposed, outcome.truth) {
        (Some(p), Some(t)) => p.abs_diff(t) <= tolerance,
        _ => false,
    }
}

/// Precision-recall sweep of the acceptance threshold over all observed
/// scores. At each threshold: precision = correct accepted / accepted,
/// recall = correct accepted / queries with ground truth.
pub fn eval_vpr(outcomes: &[VprOutcome], frame_tolerance: usize) -> Result<PRCurve, EvalError> {
    if outcomes.is_empty() {
        return Err(EvalError::Contract("no queries to evaluate".into()));
    }
    if let Some(bad) = outcomes.iter().find(|o| !o.score.is_finite()) {
        return Err(EvalError::Contract(format!(
            "query score {} is not finite",
            bad.score
        )));
    }
    let n_pos = outcomes.iter().filter(|o| o.truth.is_some()).count();
    if n_pos == 0 {
        return Err(EvalError::Contract(
            "no query carries a ground-truth map index".into(),
        ));
    }

    // Walk scores in descending order, extending the accepted set in place;
    // a sweep point is emitted after each distinct score's group.
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| {
        outcomes[b]
            .score
            .partial_cmp(&outcomes[a].score)
            .expect("scores checked finite")
    });
    let mut points = Vec::new();
    let mut accepted = 0usize;
    let mut correct = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = outcomes[order[i]].score;
        while i < order.len() && outcomes[order[i]].score == threshold {
            accepted += 1;
            if is_correct(&outcomes[order[i]], frame_tolerance) {
                correct += 1;
            }
            i += 1;
        }
        points.push(PRPoint {
            threshold,
            precision: correct as f64 / accepted as f64,
            recall: correct as f64 / n_pos as f64,
        });
    }

    let mut curve = PRCurve { points, precision_at_recall: Vec::new(), frame_tolerance };
    curve.precision_at_recall = RECALL_POINTS
        .iter()
        .map(|&r| (r, curve.interpolated_precision(r)))
        .collect();
    Ok(curve)
}

/// `threshold,precision,recall` CSV of the sweep points.
pub fn pr_curve_to_csv(curve: &PRCurve) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    out
}

/// JSON summary of a sweep: tolerance, interpolation convention, the five
/// readouts, and the caller's configuration echo.
pub fn vpr_summary(curve: &PRCurve, config_echo: Value) -> Value {
    json!({
        "frame_tolerance": curve.frame_tolerance,
        "interpolation": INTERPOLATION,
        "precision_at_recall": curve
            .precision_at_recall
            .iter()
            .map(|(r, p)| json!({ "recall": r, "precision": p }))
            .collect::<Vec<_>>(),
        "config": config_echo,
    })
}

/// JSON summary of a detection or end-to-end report.
pub fn detection_summary(report: &DetectionReport, config_echo: Value) -> Value {
    json!({
        "precision": report.precision,
        "recall": report.recall,
        "hmean": report.hmean,
        "true_positives": report.true_positives,
        "false_positives": report.false_positives,
        "false_negatives": report.false_negatives,
        "config": config_echo,
    })
}

/// Standalone SVG line plot of a PR curve (recall on x, precision on y).
pub fn pr_curve_to_svg(curve: &PRCurve) -> String {
    let (w, h, m) = (480.0, 360.0, 48.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut sorted: Vec<&PRPoint> = curve.points.iter().collect();
    sorted.sort_by(|a, b| a.recall.partial_cmp(&b.recall).expect("finite recalls"));
    let path: Vec<String> = sorted
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.recall), y(p.precision)))
        .collect();
    let mut grid = String::new();
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        grid.push_str(&format!(
            "<line x1='{:.2}' y1='{:.2}' x2='{:.2}' y2='{:.2}' stroke='#ddd'/>\
             <line x1='{:.2}' y1='{:.2}' x2='{:.2}' y2='{:.2}' stroke='#ddd'/>\
             <text x='{:.2}' y='{:.2}' font-size='10' text-anchor='middle'>{v:.1}</text>\
             <text x='{:.2}' y='{:.2}' font-size='10' text-anchor='end'>{v:.1}</text>",
            x(v), y(0.0), x(v), y(1.0),
            x(0.0), y(v), x(1.0), y(v),
            x(v), h - m + 14.0,
            m - 6.0, y(v) + 3.0,
        ));
    }
    format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{w}' height='{h}' \
         viewBox='0 0 {w} {h}'>\
         <rect width='{w}' height='{h}' fill='white'/>{grid}\
         <polyline points='{}' fill='none' stroke='#1a6baf' stroke-width='2'/>\
         <text x='{:.2}' y='{:.2}' font-size='12' text-anchor='middle'>recall</text>\
         <text x='14' y='{:.2}' font-size='12' text-anchor='middle' \
         transform='rotate(-90 14 {:.2})'>precision</text>\
         </svg>\n",
        path.join(" "),
        w / 2.0,
        h - 10.0,
        h / 2.0,
        h / 2.0,
    )
}

/// FPS measurement settings: unmeasured warmup frames, then the median
/// over `trials` timed passes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpsConfig {
    pub warmup: usize,
    pub trials: usize,
}

impl Default for FpsConfig {
    fn default() -> Self {
        FpsConfig { warmup: 3, trials: 3 }
    }
}

/// Frames per second from a frame count and elapsed seconds.
pub fn fps_of(frames: usize, seconds: f64) -> f64 {
    frames as f64 / seconds
}

/// Median wall-clock FPS of `runner` over the frame set.
pub fn measure_fps<F, R>(
    mut runner: F,
    frames: &[GrayImage],
    config: &FpsConfig,
) -> Result<f64, EvalError>
where
    F: FnMut(&GrayImage) -> R,
{
    if frames.is_empty() {
        return Err(EvalError::Contract("no frames to benchmark".into()));
    }
    if config.trials == 0 {
        return Err(EvalError::Contract("need at least one timed trial".into()));
    }
    for i in 0..config.warmup {
        std::hint::black_box(runner(&frames[i % frames.len()]));
    }
    let mut rates = Vec::with_capacity(config.trials);
    for _ in 0..config.trials {
        let start = Instant::now();
        for frame in frames {
            std::hint::black_box(runner(frame));
        }
        rates.push(fps_of(frames.len(), start.elapsed().as_secs_f64()));
    }
    rates.sort_by(|a, b| a.partial_cmp(b).expect("finite rates"));
    Ok(rates[rates.len() / 2])
}
