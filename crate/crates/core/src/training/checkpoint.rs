//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "CBK1" | u8 version | u32 tensor count
//! per tensor: u16 name len | name | u8 rank | u32 dims[rank] | f32 data
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! The first entry is the pseudo-tensor `__meta__` (rank 1) whose payload is
//! the JSON metadata bytes instead of floats.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{ModelConfig, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"CBK1";
pub const VERSION: u8 = 1;
pub const META_NAME: &str = "__meta__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cbart,
    Lm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    /// Corpus tokens in id order, starting at id 5.
    #[serde(default)]
    pub vocab: Option<Vec<String>>,
    #[serde(default)]
    pub epoch: Option<usize>,
    #[serde(default)]
    pub train_loss: Option<f64>,
    #[serde(default)]
    pub val_loss: Option<f64>,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn push_header(out: &mut Vec<u8>, name: &str, dims: &[usize]) -> Result<(), TrainError> {
    let name_len = u16::try_from(name.len()).map_err(|_| TrainError::Checkpoint(format!("name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(dims.len()).map_err(|_| TrainError::Checkpoint("rank too large".into()))?);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| TrainError::Checkpoint("dimension too large".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(params: &ParamSet<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>, TrainError> {
    let json = serde_json::to_vec(meta).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + params.num_elements() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let count = u32::try_from(params.len() + 1).map_err(|_| TrainError::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    push_header(&mut out, META_NAME, &[json.len()])?;
    out.extend_from_slice(&json);
    for (name, t) in params.iter() {
        if name == META_NAME {
            return Err(TrainError::Checkpoint("reserved tensor name".into()));
        }
        push_header(&mut out, name, &t.shape)?;
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).ok_or(TrainError::Truncated)?;
        if end > self.buf.len() {
            return Err(TrainError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet<f32>, CheckpointMeta), TrainError> {
    if bytes.len() < 4 {
        return Err(TrainError::Truncated);
    }
    if &bytes[..4] != MAGIC {
        return Err(TrainError::BadMagic);
    }
    if bytes.len() < 5 {
        return Err(TrainError::Truncated);
    }
    if bytes[4] != VERSION {
        return Err(TrainError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < 4 + 1 + 4 + 8 {
        return Err(TrainError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { buf: body, pos: 5 };
    let count = r.u32()? as usize;
    let mut meta = None;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_, _>>()?;
        if name == META_NAME {
            if rank != 1 {
                return Err(TrainError::Checkpoint("metadata must have rank 1".into()));
            }
            let json = r.take(dims[0])?;
            meta = Some(serde_json::from_slice(json).map_err(|e| TrainError::Checkpoint(format!("metadata: {e}")))?);
            continue;
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(TrainError::Truncated)?;
        let raw = r.take(n.checked_mul(4).ok_or(TrainError::Truncated)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if params.index_of(&name).is_some() {
            return Err(TrainError::Checkpoint(format!("duplicate tensor {name}")));
        }
        params.push(name, Tensor::from_vec(&dims, data));
    }
    if r.pos != body.len() {
        return Err(TrainError::Checkpoint("trailing bytes before checksum".into()));
    }
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv1a64(body) {
        return Err(TrainError::ChecksumMismatch);
    }
    let meta = meta.ok_or_else(|| TrainError::Checkpoint("missing __meta__".into()))?;
    Ok((params, meta))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>, meta: &CheckpointMeta) -> Result<(), TrainError> {
    fs::write(path, encode_checkpoint(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, CheckpointMeta), TrainError> {
    decode_checkpoint(&fs::read(path)?)
}
