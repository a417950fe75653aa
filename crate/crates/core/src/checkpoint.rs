//! Checkpoint container: named little-endian f32 tensors behind a table of
//! contents, plus a JSON metadata blob.
//!
//! Layout:
//! ```text
//! magic "SBCK" | version u32 | tensor count u32 | meta length u32
//! meta (UTF-8 JSON)
//! per tensor: name length u32 | name | rows u32 | cols u32 | data offset u64
//! tensor data, f32 row-major
//! ```
//! Data offsets are absolute file offsets.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::content::Codebook;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::model::{MelNorm, Model, ModelConfig};
use crate::train::StepRecord;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SBCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const CODEBOOK_TENSOR: &str = "codebook.centroids";
const MEL_NORM_TENSOR: &str = "mel_norm";

/// Everything needed to rebuild a model, stored as JSON in the container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: DiffusionSchedule,
    pub step: usize,
    /// Free-form run configuration echoed for provenance.
    pub run_config: serde_json::Value,
    pub loss_log: Vec<StepRecord>,
}

/// A model together with its unit codebook.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub codebook: Codebook,
    pub model: Model<f32>,
}

pub fn encode_tensors(meta: &[u8], tensors: &[(&str, &Array2<f32>)]) -> Result<Vec<u8>> {
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?;
    let toc_len: usize = tensors.iter().map(|(n, _)| 4 + n.len() + 16).sum();
    let mut offset = (16 + meta.len() + toc_len) as u64;
    let mut out = Vec::with_capacity(offset as usize + tensors.iter().map(|(_, t)| t.len() * 4).sum::<usize>());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(meta);
    for (name, t) in tensors {
        let dims = |v: usize| u32::try_from(v).map_err(|_| Error::Format("tensor too large".into()));
        out.extend_from_slice(&dims(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&dims(t.nrows())?.to_le_bytes());
        out.extend_from_slice(&dims(t.ncols())?.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (t.len() * 4) as u64;
    }
    for (_, t) in tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub type DecodedTensors = (Vec<u8>, Vec<(String, Array2<f32>)>);

pub fn decode_tensors(bytes: &[u8]) -> Result<DecodedTensors> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let meta_len = r.u32()? as usize;
    let meta = r.take(meta_len)?.to_vec();
    let mut toc = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let offset = r.u64()?;
        toc.push((name, rows, cols, offset));
    }
    let mut tensors = Vec::with_capacity(toc.len());
    for (name, rows, cols, offset) in toc {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let start = usize::try_from(offset).map_err(|_| Error::Format("bad offset".into()))?;
        let data = start
            .checked_add(len)
            .and_then(|end| bytes.get(start..end))
            .ok_or_else(|| Error::Format(format!("tensor '{name}' out of bounds")))?;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        tensors.push((name, t));
    }
    Ok((meta, tensors))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut tensors: Vec<(&str, &Array2<f32>)> = self.model.params.iter().map(|(_, n, v)| (n, v)).collect();
        tensors.push((CODEBOOK_TENSOR, &self.codebook.centroids));
        let norm = self.model.mel_norm.to_matrix();
        tensors.push((MEL_NORM_TENSOR, &norm));
        encode_tensors(&meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, mut tensors) = decode_tensors(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let cb_pos = tensors
            .iter()
            .position(|(n, _)| n == CODEBOOK_TENSOR)
            .ok_or_else(|| Error::Format("checkpoint has no codebook".into()))?;
        let (_, centroids) = tensors.swap_remove(cb_pos);
        let codebook = Codebook::new(centroids)?;
        if codebook.size() != meta.model.content.num_units {
            return Err(Error::Format(format!(
                "codebook has {} units, model expects {}",
                codebook.size(),
                meta.model.content.num_units
            )));
        }
        let norm_pos = tensors
            .iter()
            .position(|(n, _)| n == MEL_NORM_TENSOR)
            .ok_or_else(|| Error::Format("checkpoint has no mel statistics".into()))?;
        let (_, norm) = tensors.swap_remove(norm_pos);
        let mut model = Model::<f32>::new(&meta.model, 0)?;
        model.mel_norm = MelNorm::from_matrix(&norm)?;
        if model.mel_norm.dim() != meta.model.mel_dim {
            return Err(Error::Format("mel statistics width does not match the model".into()));
        }
        if tensors.len() != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameter tensors, model expects {}",
                tensors.len(),
                model.params.len()
            )));
        }
        model
            .params
            .load_from(tensors.iter().map(|(n, t)| (n.as_str(), t)))
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Checkpoint { meta, codebook, model })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
