//! Binary checkpoints.
//!
//! Layout: the magic bytes `CBLF`, a little-endian `u32` format version, a
//! little-endian `u32` header length, the JSON header, then every tensor as
//! little-endian `f32` values concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelSpec, NamedTensor};
use crate::tensor::Shape;

pub const MAGIC: [u8; 4] = *b"CBLF";
pub const FORMAT_VERSION: u32 = 1;

/// Run metadata stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    /// Seed of the stratified split the model was trained on.
    pub split_seed: u64,
    /// `(train, val, test)`
    pub split_fractions: [f64; 3],
    /// Whether variants were generated before splitting.
    #[serde(default)]
    pub augment_before_split: bool,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            class_names: Vec::new(),
            split_seed: 0,
            split_fractions: [0.8, 0.1, 0.1],
            augment_before_split: false,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let state = model.state();
    let mut offset = 0u64;
    let tensors = state
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.0,
                offset,
            };
            offset += 4 * t.data.len() as u64;
            e
        })
        .collect();
    let header = Header {
        spec: model.spec.clone(),
        seed: model.seed,
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let header_len =
        u32::try_from(json.len()).map_err(|_| Error::MalformedHeader("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in &state {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| Error::Truncated(format!("file ends before the {what}")))?;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let magic: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| Error::Truncated(format!("only {} bytes", bytes.len())))?
        .try_into()
        .expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = read_u32(bytes, 4, "format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(bytes, 8, "header length")? as usize;
    let json = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Truncated(format!("header declares {header_len} bytes")))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &bytes[12 + header_len..];

    let mut expected = 0u64;
    let mut state = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.offset != expected {
            return Err(Error::MalformedHeader(format!(
                "tensor `{}` at offset {} but the previous tensor ends at {expected}",
                e.name, e.offset
            )));
        }
        let shape = Shape(e.shape);
        let len = 4 * shape.numel();
        let start = e.offset as usize;
        let raw = payload.get(start..start + len).ok_or_else(|| {
            Error::Truncated(format!(
                "payload has {} bytes, tensor `{}` needs bytes {start}..{}",
                payload.len(),
                e.name,
                start + len
            ))
        })?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        expected += len as u64;
        state.push(NamedTensor {
            name: e.name,
            shape,
            data,
        });
    }
    if payload.len() as u64 != expected {
        return Err(Error::MalformedHeader(format!(
            "payload has {} bytes but the header declares {expected}",
            payload.len()
        )));
    }
    let mut model = build_model(&header.spec, header.seed)?;
    model.load_state(state)?;
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
