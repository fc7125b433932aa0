//! Checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! | offset | size | content                                         |
//! |--------|------|-------------------------------------------------|
//! | 0      | 8    | magic `SFCKPT\0\x01`                            |
//! | 8      | 4    | format version (`u32`)                          |
//! | 12     | 8    | header length `H` in bytes (`u64`)              |
//! | 20     | H    | UTF-8 JSON header                               |
//! | 20 + H | 8·N  | every tensor's `f64` values, in header order    |
//!
//! The header holds the model config, input normalization, a free-form tag,
//! optional training provenance and the name and shape of every tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::data::{Normalization, Task};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SFCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a checkpoint was trained on, consulted by the leakage guards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: Task,
    /// Last calendar day any training or tuning window was allowed to touch
    /// on the train-period side, exclusive.
    pub boundary_day: NaiveDate,
    /// Participants whose test-period windows were used for training.
    pub test_period_users: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub tag: String,
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    normalization: Normalization,
    tag: String,
    provenance: Option<Provenance>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.params.check_shapes(&checkpoint.config)?;
    let header = Header {
        config: checkpoint.config.clone(),
        normalization: checkpoint.params.normalization,
        tag: checkpoint.tag.clone(),
        provenance: checkpoint.provenance.clone(),
        tensors: checkpoint
            .params
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in checkpoint.params.tensors.values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{} is truncated", path.display())))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = u64::from_le_bytes(u64b) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("header is truncated".into()))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut tensors = IndexMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; 8 * n];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("data for `{}` is truncated", e.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(e.name, Tensor::new(e.shape, data)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let params = ModelParams {
        tensors,
        normalization: header.normalization,
    };
    header.config.validate()?;
    params.check_shapes(&header.config)?;
    Ok(Checkpoint {
        config: header.config,
        params,
        tag: header.tag,
        provenance: header.provenance,
    })
}
