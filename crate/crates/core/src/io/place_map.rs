//! Place-map index document: a single JSON file tagged
//! `{"format":"tvpr-map","version":1,...}` carrying the filter policy and
//! each map frame's retained instances.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotations::AnnotationInstance;
use super::IoError;
use crate::geometry::Polygon;
use crate::types::TextInstance;
use crate::vpr::{FilterPolicy, MapFrame, PlaceMap};

pub const MAP_FORMAT: &str = "tvpr-map";
pub const MAP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MapDoc {
    format: String,
    version: u32,
    policy: FilterPolicy,
    frames: Vec<FrameDoc>,
}

#[derive(Serialize, Deserialize)]
struct FrameDoc {
    frame_id: String,
    instances: Vec<AnnotationInstance>,
}

pub fn save_place_map(map: &PlaceMap, path: &Path) -> Result<(), IoError> {
    let doc = MapDoc {
        format: MAP_FORMAT.to_string(),
        version: MAP_VERSION,
        policy: map.policy.clone(),
        frames: map
            .frames
            .iter()
            .map(|f| FrameDoc {
                frame_id: f.frame_id.clone(),
                instances: f
                    .instances
                    .iter()
                    .map(AnnotationInstance::from_text_instance)
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("place map serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_place_map(path: &Path) -> Result<PlaceMap, IoError> {
    let text = fs::read_to_string(path)?;
    let doc: MapDoc = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if doc.format != MAP_FORMAT {
        return Err(IoError::Parse {
            line: 1,
            message: format!("unexpected format tag {:?}, expected {MAP_FORMAT:?}", doc.format),
        });
    }
    if doc.version != MAP_VERSION {
        return Err(IoError::Version {
            what: "place map",
            found: doc.version,
            expected: MAP_VERSION,
        });
    }
    let mut seen = std::collections::HashSet::new();
    let mut frames = Vec::with_capacity(doc.frames.len());
    for frame in &doc.frames {
        if !seen.insert(frame.frame_id.as_str()) {
            return Err(IoError::DuplicateFrameId(frame.frame_id.clone()));
        }
        let instances = frame
            .instances
            .iter()
            .map(|a| {
                let bad = |e: crate::geometry::GeometryError| IoError::InvalidRecord {
                    frame_id: frame.frame_id.clone(),
                    message: format!("instance {:?}: {e}", a.text),
                };
                let polygon = Polygon::new(a.polygon.clone()).map_err(bad)?;
                polygon.validate().map_err(bad)?;
                Ok(TextInstance::new(polygon, a.text.clone(), a.confidence))
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        frames.push(MapFrame {
            frame_id: frame.frame_id.clone(),
            instances,
        });
    }
    Ok(PlaceMap {
        frames,
        policy: doc.policy,
    })
}
