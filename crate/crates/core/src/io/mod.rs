//! Persistence and interchange formats.
//!
//! Four writer/reader pairs, each an identity on its declared content:
//! JSONL annotation files (one frame per line), binary `P5` PGM images,
//! model checkpoints (a JSON manifest line followed by a raw little-endian
//! f32 blob, for bitwise parameter fidelity), and the place-map index
//! document. Parse failures never panic and always carry a location — a
//! line number for text formats, a byte offset for binary ones.

mod annotations;
mod checkpoint;
mod pgm;
mod place_map;

pub use annotations::{read_annotations, write_annotations, AnnotationInstance, AnnotationRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, ParamEntry};
pub use pgm::{read_pgm, write_pgm};
pub use place_map::{load_place_map, save_place_map};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("byte {offset}: {message}")]
    Binary { offset: usize, message: String },
    #[error("duplicate frame id {0:?}")]
    DuplicateFrameId(String),
    #[error("frame {frame_id:?}: {message}")]
    InvalidRecord { frame_id: String, message: String },
    #[error("unsupported {what} version {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("checkpoint blob is {found} bytes but the inventory requires {expected}")]
    Length { expected: usize, found: usize },
    #[error("parameter {name:?}: stored shape {stored:?}, expected {expected:?}")]
    Shape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
}
