//! Binary checkpoint: magic, version, JSON metadata, then every parameter as
//! name, shape and little-endian doubles. Values round-trip bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::AirFormerModel;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"AIRFCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Free-form data attached by the caller (normalization, stations, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode(model: &AirFormerModel, extra: &serde_json::Value) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        extra: extra.clone(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::with_capacity(64 + meta.len() + 8 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model from its stored configuration and overwrites every
/// parameter with the stored values.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(AirFormerModel, CheckpointMeta)> {
    let fail = |message: String| Error::Checkpoint {
        path: origin.to_path_buf(),
        message,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(&fail)? != MAGIC {
        return Err(fail("not a checkpoint file".into()));
    }
    let version = r.u32().map_err(&fail)?;
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let meta_len = r.u64().map_err(&fail)? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len).map_err(&fail)?).map_err(|e| fail(format!("metadata: {e}")))?;
    let mut model = AirFormerModel::new(meta.config.clone())?;
    let count = r.u64().map_err(&fail)? as usize;
    if count != model.params.len() {
        return Err(fail(format!(
            "{count} parameters stored, configuration defines {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32().map_err(&fail)? as usize;
        let name = std::str::from_utf8(r.take(name_len).map_err(&fail)?)
            .map_err(|e| fail(format!("parameter name: {e}")))?
            .to_string();
        let rank = r.u32().map_err(&fail)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().map_err(&fail)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| fail("shape overflow".into()))?).map_err(&fail)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = model.params.id(&name).ok_or_else(|| fail(format!("unknown parameter {name}")))?;
        if model.params.value(id).shape() != shape.as_slice() {
            return Err(fail(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                model.params.value(id).shape()
            )));
        }
        model.params.get_mut(id).value = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((model, meta))
}

pub fn save(model: &AirFormerModel, extra: &serde_json::Value, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model, extra)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(AirFormerModel, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
