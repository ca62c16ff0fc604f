//! Model checkpoints: a single JSON manifest line (format tag, version,
//! architecture config, parameter inventory with byte offsets) terminated
//! by LF, followed by every parameter's f32 data concatenated little-endian
//! in inventory order. Raw bytes rather than JSON numbers so that
//! save→load reproduces each weight bit-for-bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "tvpr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: serde_json::Value,
    inventory: Vec<ParamEntry>,
}

/// Architecture config plus named parameter tensors, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl CheckpointData {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn save_checkpoint(data: &CheckpointData, path: &Path) -> Result<(), IoError> {
    let mut inventory = Vec::with_capacity(data.tensors.len());
    let mut offset = 0usize;
    for (name, tensor) in &data.tensors {
        inventory.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += tensor.len() * 4;
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: data.config.clone(),
        inventory,
    };
    let mut bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes.reserve(offset);
    for (_, tensor) in &data.tensors {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, IoError> {
    let bytes = fs::read(path)?;
    let newline = bytes.iter().position(|b| *b == b'\n').ok_or(IoError::Binary {
        offset: bytes.len(),
        message: "missing manifest line terminator".into(),
    })?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..newline]).map_err(|e| IoError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(IoError::Parse {
            line: 1,
            message: format!(
                "unexpected format tag {:?}, expected {CHECKPOINT_FORMAT:?}",
                manifest.format
            ),
        });
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(IoError::Version {
            what: "checkpoint",
            found: manifest.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut expected = 0usize;
    for entry in &manifest.inventory {
        if entry.offset != expected {
            return Err(IoError::Binary {
                offset: newline + 1 + entry.offset,
                message: format!(
                    "parameter {:?}: inventory offset {} should be {expected}",
                    entry.name, entry.offset
                ),
            });
        }
        expected += entry.shape.iter().product::<usize>() * 4;
    }
    let blob = &bytes[newline + 1..];
    if blob.len() != expected {
        return Err(IoError::Length {
            expected,
            found: blob.len(),
        });
    }
    let tensors = manifest
        .inventory
        .iter()
        .map(|entry| {
            let count: usize = entry.shape.iter().product();
            let data: Vec<f32> = blob[entry.offset..entry.offset + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(entry.shape.clone(), data)
                .expect("blob slice sized from the inventory shape");
            (entry.name.clone(), tensor)
        })
        .collect();
    Ok(CheckpointData {
        config: manifest.config,
        tensors,
    })
}
