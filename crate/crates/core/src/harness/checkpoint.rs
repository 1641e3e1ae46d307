//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "SVQA1"  u32 version  u32 len + config text  u32 tensor count
//! per tensor: u32 len + name, u32 rank, rank x u32 dims, f32 payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{NamedParams, Tensor};

pub const MAGIC: &[u8; 5] = b"SVQA1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<CheckpointTensor>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {}", self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

impl Checkpoint {
    pub fn from_params(config: String, params: &NamedParams) -> Self {
        Checkpoint {
            config,
            tensors: params
                .iter()
                .map(|(name, t)| CheckpointTensor {
                    name: name.clone(),
                    dims: t.shape().to_vec(),
                    data: t.data().iter().map(|&v| v as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize)?;
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for t in &self.tensors {
            put_u32(&mut out, t.name.len())?;
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len())?;
            for &d in &t.dims {
                put_u32(&mut out, d)?;
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::format(path, reason);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len()).map_err(fail)? != MAGIC {
            return Err(fail("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(fail)?;
        if version != FORMAT_VERSION as usize {
            return Err(fail(format!("unsupported checkpoint version {version}")));
        }
        let config = r.string().map_err(fail)?;
        let count = r.u32().map_err(fail)?;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string().map_err(fail)?;
            let rank = r.u32().map_err(fail)?;
            let dims = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>().map_err(fail)?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail("tensor too large".into()))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| fail("tensor too large".into()))?).map_err(fail)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(CheckpointTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies stored values into `params`, which must match by name and shape.
    pub fn restore_into(&self, params: &NamedParams) -> Result<()> {
        if params.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((name, t), stored) in params.iter().zip(&self.tensors) {
            if *name != stored.name || t.shape() != stored.dims.as_slice() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{name}` {:?}",
                    stored.name,
                    stored.dims,
                    t.shape()
                )));
            }
            t.set_data(stored.data.iter().map(|&v| v as f64).collect())?;
        }
        Ok(())
    }
}

/// Rounds every tensor to f32 in place, matching what a reload yields.
pub fn round_to_f32(params: &NamedParams) {
    for (_, t) in params {
        t.update_data(|d| d.iter_mut().for_each(|v| *v = *v as f32 as f64));
    }
}

pub fn tensor_from(stored: &CheckpointTensor) -> Result<Tensor> {
    Tensor::new(&stored.dims, stored.data.iter().map(|&v| v as f64).collect())
}
