//! Matching cost and the multi-task set-prediction loss.
//!
//! Ground truth is prepared once per frame: polygons resampled to the
//! head's fixed vertex count and normalized, transcriptions mapped to class
//! indices. Matching runs on detached predictions (plain f64), the loss is
//! then built on the tape against the matched layout, so gradients flow
//! through the head tensors but never through the assignment itself.

use crate::geometry::resample_polygon;
use crate::spotter::{HeadOutputs, QueryPrediction, SpotterConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::types::{Frame, TextInstance};

use super::{hungarian_match, MatchAssignment, TrainConfig, TrainError};

/// Ground truth for one word, in head coordinates: `n_polygon_points`
/// normalized vertices and charset class indices (no end-of-word; padding
/// happens inside the loss).
#[derive(Clone, Debug, PartialEq)]
pub struct TruthInstance {
    pub polygon: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
}

/// One training frame: patch tokens plus prepared truths.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub frame_id: String,
    pub tokens: Tensor<f32>,
    pub truths: Vec<TruthInstance>,
}

/// Convert an annotated instance into head coordinates.
pub fn prepare_truth(
    inst: &TextInstance,
    config: &SpotterConfig,
) -> Result<TruthInstance, TrainError> {
    let resampled = resample_polygon(&inst.polygon, config.n_polygon_points)?;
    let size = config.image_size as f64;
    let polygon = resampled.points().iter().map(|p| [p[0] / size, p[1] / size]).collect();
    let mut classes = Vec::with_capacity(inst.text.chars().count());
    for c in inst.text.chars() {
        match config.char_class(c) {
            Some(k) => classes.push(k),
            None => {
                return Err(TrainError::Contract(format!(
                    "character {c:?} in {:?} is outside the charset",
                    inst.text
                )))
            }
        }
    }
    if classes.len() > config.max_word_len {
        return Err(TrainError::Contract(format!(
            "word {:?} longer than max_word_len {}",
            inst.text, config.max_word_len
        )));
    }
    Ok(TruthInstance { polygon, classes })
}

/// Patchify a frame and prepare all its truths.
pub fn prepare_example(frame: &Frame, config: &SpotterConfig) -> Result<TrainExample, TrainError> {
    if frame.image.width != config.image_size || frame.image.height != config.image_size {
        return Err(TrainError::Contract(format!(
            "frame {:?} is {}x{}, expected {3}x{3}",
            frame.id, frame.image.width, frame.image.height, config.image_size
        )));
    }
    let tokens = crate::spotter::patchify(&frame.image, config.patch_size)
        .map_err(|e| TrainError::Contract(e.to_string()))?;
    let truths = frame
        .instances
        .iter()
        .map(|inst| prepare_truth(inst, config))
        .collect::<Result<_, _>>()?;
    Ok(TrainExample { frame_id: frame.id.clone(), tokens, truths })
}

/// Cross-entropy of the predicted character distribution at `position`
/// against `class`.
fn char_ce(pred: &QueryPrediction, position: usize, class: usize) -> f64 {
    -pred.char_probs(position)[class].ln()
}

/// Assignment cost between one query and one truth:
/// `λ_cls·(1−p_text) + λ_poly·meanL1(polygon) + λ_char·mean CE(truth chars)`.
pub fn match_cost(pred: &QueryPrediction, truth: &TruthInstance, config: &TrainConfig) -> f64 {
    let cls = config.lambda_cls * (1.0 - pred.p_text());
    let mut l1 = 0.0;
    for (p, t) in pred.polygon.iter().zip(&truth.polygon) {
        l1 += (p[0] - t[0]).abs() + (p[1] - t[1]).abs();
    }
    let poly = l1 / (2.0 * truth.polygon.len() as f64);
    let chars = if truth.classes.is_empty() {
        0.0
    } else {
        let sum: f64 = truth
            .classes
            .iter()
            .enumerate()
            .map(|(pos, &k)| char_ce(pred, pos, k))
            .sum();
        sum / truth.classes.len() as f64
    };
    cls + config.lambda_poly * poly + config.lambda_char * chars
}

/// Optimal query↔truth assignment under [`match_cost`].
pub fn match_predictions(
    preds: &[QueryPrediction],
    truths: &[TruthInstance],
    config: &TrainConfig,
) -> Result<MatchAssignment, TrainError> {
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| truths.iter().map(|t| match_cost(p, t, config)).collect())
        .collect();
    hungarian_match(&cost)
}

/// Loss terms still on the tape. `total = cls + λ_poly·poly + λ_char·chars`;
/// the three component terms are unweighted per-query means.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub cls: Var,
    pub poly: Var,
    pub chars: Var,
}

/// Scalar snapshot of [`LossTerms`] for traces and logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub poly: f64,
    pub chars: f64,
}

impl LossTerms {
    pub fn snapshot<S: Scalar>(&self, tape: &Tape<S>) -> LossBreakdown {
        let read = |v: Var| tape.value(v).item().as_f64();
        LossBreakdown {
            total: read(self.total),
            cls: read(self.cls),
            poly: read(self.poly),
            chars: read(self.chars),
        }
    }
}

/// Build the set-prediction loss on the tape.
///
/// Every query pays objectness cross-entropy against its matched/unmatched
/// target; matched queries additionally pay polygon L1 (mean over
/// coordinates) and character cross-entropy (mean over `max_word_len`
/// positions, truth padded with end-of-word). All three terms are averaged
/// over the full query set, so unmatched queries dilute the matched terms
/// rather than being dropped.
pub fn spotting_loss<S: Scalar>(
    tape: &mut Tape<S>,
    heads: &HeadOutputs,
    truths: &[TruthInstance],
    assignment: &MatchAssignment,
    spotter: &SpotterConfig,
    config: &TrainConfig,
) -> Result<LossTerms, TrainError> {
    let n_q = tape.value(heads.obj).shape()[0];
    let p2 = 2 * spotter.n_polygon_points;
    let ml = spotter.max_word_len;
    let n_cls = spotter.n_classes() + 1;
    if assignment.pairs.len() != truths.len() {
        return Err(TrainError::Contract(format!(
            "assignment covers {} of {} truths",
            assignment.pairs.len(),
            truths.len()
        )));
    }
    for &(q, t) in &assignment.pairs {
        if q >= n_q || t >= truths.len() {
            return Err(TrainError::Contract(format!(
                "pair ({q}, {t}) outside {n_q} queries / {} truths",
                truths.len()
            )));
        }
        if truths[t].polygon.len() != spotter.n_polygon_points {
            return Err(TrainError::Contract(format!(
                "truth {t} has {} polygon points, head expects {}",
                truths[t].polygon.len(),
                spotter.n_polygon_points
            )));
        }
    }

    // Objectness: one-hot pick of the log-softmax row, negated mean.
    let mut obj_mask = vec![S::of(0.0); n_q * 2];
    for q in 0..n_q {
        let matched = assignment.pairs.iter().any(|&(pq, _)| pq == q);
        obj_mask[2 * q + usize::from(matched)] = S::one();
    }
    let lp = tape.log_softmax(heads.obj, 1)?;
    let maskv = tape.constant(Tensor::new(vec![n_q, 2], obj_mask)?);
    let picked = tape.mul(lp, maskv)?;
    let s = tape.sum(picked)?;
    let cls = tape.scale(s, S::of(-1.0 / n_q as f64))?;

    let (poly, chars) = if assignment.pairs.is_empty() {
        let zero = tape.constant(Tensor::scalar(S::of(0.0)));
        (zero, zero)
    } else {
        let qidx: Vec<usize> = assignment.pairs.iter().map(|&(q, _)| q).collect();
        let n_m = qidx.len();

        let pred_poly = tape.select_rows(heads.poly, &qidx)?;
        let mut flat = Vec::with_capacity(n_m * p2);
        for &(_, t) in &assignment.pairs {
            for p in &truths[t].polygon {
                flat.push(S::of(p[0]));
                flat.push(S::of(p[1]));
            }
        }
        let truth_poly = tape.constant(Tensor::new(vec![n_m, p2], flat)?);
        let diff = tape.sub(pred_poly, truth_poly)?;
        let l1 = tape.abs(diff)?;
        let s = tape.sum(l1)?;
        let poly = tape.scale(s, S::of(1.0 / (p2 * n_q) as f64))?;

        let pred_chars = tape.select_rows(heads.chars, &qidx)?;
        let rows = tape.reshape(pred_chars, vec![n_m * ml, n_cls])?;
        let lp = tape.log_softmax(rows, 1)?;
        let mut char_mask = vec![S::of(0.0); n_m * ml * n_cls];
        for (row, &(_, t)) in assignment.pairs.iter().enumerate() {
            for pos in 0..ml {
                let class = truths[t].classes.get(pos).copied().unwrap_or(spotter.eow_class());
                char_mask[(row * ml + pos) * n_cls + class] = S::one();
            }
        }
        let maskv = tape.constant(Tensor::new(vec![n_m * ml, n_cls], char_mask)?);
        let picked = tape.mul(lp, maskv)?;
        let s = tape.sum(picked)?;
        let chars = tape.scale(s, S::of(-1.0 / (ml * n_q) as f64))?;
        (poly, chars)
    };

    let wp = tape.scale(poly, S::of(config.lambda_poly))?;
    let wc = tape.scale(chars, S::of(config.lambda_char))?;
    let partial = tape.add(cls, wp)?;
    let total = tape.add(partial, wc)?;
    Ok(LossTerms { total, cls, poly, chars })
}
