//! Checkpoint layout:
//!
//! ```text
//! b"MASKDIF1" | u32 LE header length | JSON header | f32 LE weights
//! ```
//!
//! Weights follow the order of the header's `tensors` list.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::weights::{parameter_layout, DenoiserConfig, DenoiserWeights};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::schedule::ScheduleParams;
use crate::text::TextEncoderConfig;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MASKDIF1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub text: TextEncoderConfig,
    /// Path of the vocabulary JSON, relative to the checkpoint.
    pub vocab: String,
    /// Codec patch stride the latents were produced with.
    pub codec_stride: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn tensors_for(model: &DenoiserConfig) -> Vec<TensorEntry> {
        parameter_layout(model)
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect()
    }
}

pub fn write_checkpoint<W: Write>(mut out: W, header: &CheckpointHeader, weights: &DenoiserWeights) -> Result<()> {
    if header.model != weights.config || header.tensors != CheckpointHeader::tensors_for(&weights.config) {
        return Err(Error::Checkpoint("header does not describe these weights".into()));
    }
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::with_capacity(weights.num_parameters() * 4);
    for t in weights.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(CheckpointHeader, DenoiserWeights)> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    input
        .read_exact(&mut len)
        .map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input
        .read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    header.model.validate()?;
    if header.tensors != CheckpointHeader::tensors_for(&header.model) {
        return Err(Error::Checkpoint("tensor list does not match model config".into()));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input
            .read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("truncated data for {}", entry.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(&entry.shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after weights".into()));
    }
    let weights = DenoiserWeights::from_tensors(header.model.clone(), tensors)?;
    if !weights.is_finite() {
        return Err(Error::NonFinite("checkpoint weights"));
    }
    Ok((header, weights))
}
