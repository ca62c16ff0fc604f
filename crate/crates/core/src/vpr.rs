//! Place recognition over spotted text.
//!
//! A place is represented by the words visible in its frame. Spotted
//! instances are filtered (confidence, length, character class), then query
//! frames are scored against every map frame by optimally pairing words
//! under edit-distance similarity. The normalizer is the larger word count,
//! so missing or hallucinated words both cost score. Everything here is
//! plain string/set arithmetic — no tensors, no randomness.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::training::hungarian_match;
use crate::types::{Frame, TextInstance};

/// Word-pair similarities below this contribute nothing to a frame score.
pub const DEFAULT_SIM_FLOOR: f64 = 0.6;

#[derive(Debug, Error, PartialEq)]
pub enum VprError {
    #[error("place map has no frames")]
    EmptyMap,
    #[error("duplicate frame id {0:?}")]
    DuplicateFrameId(String),
    #[error("config: {0}")]
    Config(String),
}

/// Which spotted instances count as place evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_confidence: f64,
    pub min_length: usize,
    pub min_alnum_fraction: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_confidence: 0.7,
            min_length: 3,
            min_alnum_fraction: 1.0,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), VprError> {
        if !(0.0..=1.0).contains(&self.min_confidence)
            || !(0.0..=1.0).contains(&self.min_alnum_fraction)
        {
            return Err(VprError::Config(format!(
                "min_confidence {} and min_alnum_fraction {} must lie in [0,1]",
                self.min_confidence, self.min_alnum_fraction
            )));
        }
        Ok(())
    }

    fn keeps(&self, inst: &TextInstance) -> bool {
        let n = inst.text.chars().count();
        if inst.confidence < self.min_confidence || n < self.min_length {
            return false;
        }
        let alnum = inst.text.chars().filter(|c| c.is_ascii_alphanumeric()).count();
        alnum as f64 / n as f64 >= self.min_alnum_fraction
    }
}

/// Keep instances passing all three policy predicates, in order.
pub fn filter_instances(instances: &[TextInstance], policy: &FilterPolicy) -> Vec<TextInstance> {
    instances.iter().filter(|i| policy.keeps(i)).cloned().collect()
}

/// Normalized Levenshtein similarity in [0,1], case-folded. Two empty
/// strings are identical (similarity 1); empty vs non-empty is 0.
pub fn edit_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().flat_map(char::to_uppercase).collect();
    let b: Vec<char> = b.chars().flat_map(char::to_uppercase).collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let max_len = a.len().max(b.len());
    1.0 - levenshtein(&a, &b) as f64 / max_len as f64
}

fn levenshtein(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Similarity of two word sets in [0,1]: optimal one-to-one word pairing
/// (similarities below `sim_floor` zeroed), normalized by the larger set.
/// Exactly symmetric; a frame with no evidence scores 0 against anything.
pub fn frame_similarity(q: &[TextInstance], r: &[TextInstance], sim_floor: f64) -> f64 {
    if q.is_empty() || r.is_empty() {
        return 0.0;
    }
    let qw: Vec<&str> = q.iter().map(|i| i.text.as_str()).collect();
    let rw: Vec<&str> = r.iter().map(|i| i.text.as_str()).collect();
    // Orient the pair canonically (longer side as rows, lexicographic order
    // on ties) so both argument orders run the identical computation.
    let swap = match qw.len().cmp(&rw.len()) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => qw > rw,
    };
    let (rows, cols) = if swap { (&rw, &qw) } else { (&qw, &rw) };
    let sim: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| {
            cols.iter()
                .map(|b| {
                    let s = edit_similarity(a, b);
                    if s < sim_floor {
                        0.0
                    } else {
                        s
                    }
                })
                .collect()
        })
        .collect();
    let cost: Vec<Vec<f64>> =
        sim.iter().map(|row| row.iter().map(|s| 1.0 - s).collect()).collect();
    let assignment = hungarian_match(&cost).expect("finite rectangular cost matrix");
    let paired: f64 = assignment.pairs.iter().map(|&(i, j)| sim[i][j]).sum();
    paired / rows.len() as f64
}

/// One map frame's retained evidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFrame {
    pub frame_id: String,
    pub instances: Vec<TextInstance>,
}

/// The reference side of a traversal: filtered text per map frame, plus the
/// policy that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceMap {
    pub frames: Vec<MapFrame>,
    pub policy: FilterPolicy,
}

/// Outcome of resolving one query against a map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub query_id: String,
    pub best_frame_id: Option<String>,
    pub score: f64,
    pub accepted: bool,
}

/// Filter each frame's instances under `policy` and store them in order.
pub fn build_place_map(frames: &[Frame], policy: &FilterPolicy) -> Result<PlaceMap, VprError> {
    policy.validate()?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        if !seen.insert(frame.id.clone()) {
            return Err(VprError::DuplicateFrameId(frame.id.clone()));
        }
        out.push(MapFrame {
            frame_id: frame.id.clone(),
            instances: filter_instances(&frame.instances, policy),
        });
    }
    Ok(PlaceMap { frames: out, policy: policy.clone() })
}

/// Score a query frame against every map frame; best score wins, ties going
/// to the smallest map index. The query's instances are filtered with the
/// map's own policy first.
pub fn query_place(
    map: &PlaceMap,
    query: &Frame,
    decision_threshold: f64,
) -> Result<MatchResult, VprError> {
    if map.frames.is_empty() {
        return Err(VprError::EmptyMap);
    }
    let evidence = filter_instances(&query.instances, &map.policy);
    let mut best_idx = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (idx, frame) in map.frames.iter().enumerate() {
        let s = frame_similarity(&evidence, &frame.instances, DEFAULT_SIM_FLOOR);
        if s > best_score {
            best_score = s;
            best_idx = idx;
        }
    }
    Ok(MatchResult {
        query_id: query.id.clone(),
        best_frame_id: Some(map.frames[best_idx].frame_id.clone()),
        score: best_score,
        accepted: best_score >= decision_threshold,
    })
}
