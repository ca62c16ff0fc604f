//! JSONL annotation interchange: one frame record per line, UTF-8, LF.
//! Polygons are serialized as raw pixel-space point lists so the file
//! round-trips float-exact regardless of internal canonicalization.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::geometry::Polygon;
use crate::types::{Frame, TextInstance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInstance {
    pub polygon: Vec<[f64; 2]>,
    pub text: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub frame_id: String,
    pub image_path: String,
    pub instances: Vec<AnnotationInstance>,
}

impl AnnotationInstance {
    pub fn from_text_instance(inst: &TextInstance) -> Self {
        AnnotationInstance {
            polygon: inst.polygon.points().to_vec(),
            text: inst.text.clone(),
            confidence: inst.confidence,
        }
    }
}

impl AnnotationRecord {
    pub fn from_frame(frame: &Frame, image_path: &str) -> Self {
        AnnotationRecord {
            frame_id: frame.id.clone(),
            image_path: image_path.to_string(),
            instances: frame
                .instances
                .iter()
                .map(AnnotationInstance::from_text_instance)
                .collect(),
        }
    }

    /// Re-validate polygons and materialize typed instances.
    pub fn instances(&self) -> Result<Vec<TextInstance>, IoError> {
        self.instances
            .iter()
            .map(|a| {
                let bad = |e: crate::geometry::GeometryError| IoError::InvalidRecord {
                    frame_id: self.frame_id.clone(),
                    message: format!("instance {:?}: {e}", a.text),
                };
                let polygon = Polygon::new(a.polygon.clone()).map_err(bad)?;
                polygon.validate().map_err(bad)?;
                Ok(TextInstance::new(polygon, a.text.clone(), a.confidence))
            })
            .collect()
    }
}

fn validate(records: &[AnnotationRecord]) -> Result<(), IoError> {
    let mut seen = HashSet::new();
    for record in records {
        if !seen.insert(record.frame_id.as_str()) {
            return Err(IoError::DuplicateFrameId(record.frame_id.clone()));
        }
        for (i, inst) in record.instances.iter().enumerate() {
            if inst.polygon.len() < 3 {
                return Err(IoError::InvalidRecord {
                    frame_id: record.frame_id.clone(),
                    message: format!(
                        "instance {i}: polygon has {} points, need at least 3",
                        inst.polygon.len()
                    ),
                });
            }
            if !(0.0..=1.0).contains(&inst.confidence) {
                return Err(IoError::InvalidRecord {
                    frame_id: record.frame_id.clone(),
                    message: format!("instance {i}: confidence {} outside [0,1]", inst.confidence),
                });
            }
        }
    }
    Ok(())
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<(), IoError> {
    validate(records)?;
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("annotation records serialize"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| IoError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    validate(&records)?;
    Ok(records)
}
