//! Versioned, self-describing model files.
//!
//! Layout: the 8-byte magic `SKYCLEAR`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header (config, seed, step, and
//! the name / shape / offset of every parameter), then all parameter values
//! as row-major little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::Model;
use crate::config::Config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SKYCLEAR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the value section, in elements.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: Config,
    seed: u64,
    step: usize,
    params: Vec<Entry>,
}

/// Training progress stored next to the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub step: usize,
}

pub fn to_bytes(model: &Model<f32>, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let mut params = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        params.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    let header = Header { config: model.config.clone(), seed: model.config.train.seed, step: meta.step, params };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f32>, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
    let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    let values = &body[hlen..];
    if values.len() % 4 != 0 {
        return Err(bad("value section is not a whole number of f32"));
    }
    let values: Vec<f32> = values.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

    let mut model = Model::<f32>::new(&header.config)?;
    if header.params.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, the configured model {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for e in &header.params {
        let id = model.params.find(&e.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
        if model.params.get(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, expected {:?}",
                e.name,
                e.shape,
                model.params.get(id).shape()
            )));
        }
        let n: usize = e.shape.iter().product();
        let data = values.get(e.offset..e.offset + n).ok_or_else(|| bad("truncated values"))?;
        *model.params.get_mut(id) = Tensor::from_vec(&e.shape, data.to_vec());
    }
    Ok((model, CheckpointMeta { step: header.step }))
}

pub fn save(path: &Path, model: &Model<f32>, meta: CheckpointMeta) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn round_trip_is_lossless() {
        let m = Model::<f32>::new(&Preset::Tiny.config()).unwrap();
        let bytes = to_bytes(&m, CheckpointMeta { step: 7 }).unwrap();
        let (back, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(meta.step, 7);
        assert_eq!(back.params, m.params);
        assert_eq!(back.config, m.config);
        assert_eq!(to_bytes(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let m = Model::<f32>::new(&Preset::Tiny.config()).unwrap();
        let mut bytes = to_bytes(&m, CheckpointMeta::default()).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::CheckpointVersion { found: 99, expected: VERSION })));
        assert!(matches!(from_bytes(b"garbage"), Err(Error::Checkpoint(_))));
    }
}
