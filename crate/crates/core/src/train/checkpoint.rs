//! Binary checkpoint container.
//!
//! Layout, all little-endian: the magic bytes `MMD1`, a `u64` header length,
//! the UTF-8 JSON header, then every tensor's `f64` payload back to back in
//! manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{LogRow, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::tensor::Tensor;
use crate::textnum::TokenizerState;

const MAGIC: &[u8; 4] = b"MMD1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub group: TensorGroup,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenizer: Option<TokenizerState>,
    pub epoch: usize,
    pub adam_t: u64,
    pub best_val: Option<(usize, f64)>,
    pub log: Vec<LogRow>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    /// Scalars in the model parameters (optimizer moments excluded).
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.group == TensorGroup::Param)
            .map(|t| t.shape.iter().product::<usize>())
            .sum()
    }
}

/// Everything needed to resume training or to evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub tokenizer: Option<TokenizerState>,
    pub epoch: usize,
    pub best_val: Option<(usize, f64)>,
    pub log: Vec<LogRow>,
    pub adam: Adam,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let params = ckpt.model.params();
    let mut entries = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            group: TensorGroup::Param,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() * 8;
        payload.push(t.data());
    }
    for (group, moments) in [(TensorGroup::AdamM, &ckpt.adam.m), (TensorGroup::AdamV, &ckpt.adam.v)] {
        for ((name, t), m) in params.iter().zip(moments) {
            entries.push(TensorEntry {
                name: name.to_string(),
                group,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += m.len() * 8;
            payload.push(m);
        }
    }
    let header = CheckpointHeader {
        model: ckpt.model.config().clone(),
        train: ckpt.train.clone(),
        tokenizer: ckpt.tokenizer.clone(),
        epoch: ckpt.epoch,
        adam_t: ckpt.adam.t,
        best_val: ckpt.best_val,
        log: ckpt.log.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for data in payload {
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing MMD1 magic".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() < len {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    Ok((header, &body[len..]))
}

/// Reads and parses only the JSON header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head)
        .map_err(|_| Error::CorruptCheckpoint("file shorter than its preamble".into()))?;
    if &head[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint("missing MMD1 magic".into()));
    }
    let len = u64::from_le_bytes(head[4..12].try_into().expect("8 bytes")) as usize;
    let mut json = vec![0u8; len];
    f.read_exact(&mut json)
        .map_err(|_| Error::CorruptCheckpoint("truncated header".into()))?;
    serde_json::from_slice(&json).map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, payload) = split_header(&bytes)?;
    let expected: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if payload.len() != expected {
        return Err(Error::CorruptCheckpoint(format!(
            "payload has {} bytes, manifest needs {expected}",
            payload.len()
        )));
    }
    let mut named = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor {} out of range", e.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match e.group {
            TensorGroup::Param => named.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?)),
            TensorGroup::AdamM => m.push(data),
            TensorGroup::AdamV => v.push(data),
        }
    }
    let params = Params::from_tensors(&header.model, named)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::CorruptCheckpoint("optimizer state does not match parameters".into()));
    }
    let mut adam = Adam::new(params.tensors().iter().map(Tensor::numel));
    adam.t = header.adam_t;
    adam.m = m;
    adam.v = v;
    Ok(Checkpoint {
        model: Model::from_params(header.model, params)?,
        train: header.train,
        tokenizer: header.tokenizer,
        epoch: header.epoch,
        best_val: header.best_val,
        log: header.log,
        adam,
    })
}
