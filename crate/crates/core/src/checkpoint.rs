//! Binary parameter checkpoints.
//!
//! Layout (little-endian): `b"LCN1"`, `u32` array count, then per array a
//! `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dims and
//! the `f64` data. A `u32` length and a JSON metadata object follow.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

pub const MAGIC: &[u8; 4] = b"LCN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
    pub metadata: Value,
}

impl Checkpoint {
    pub fn from_parameters(params: &Parameters, metadata: Value) -> Self {
        Self {
            arrays: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            metadata,
        }
    }

    /// Copies every stored array into `params`; names and shapes must match
    /// one to one.
    pub fn apply_to(&self, params: &mut Parameters) -> Result<()> {
        if self.arrays.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} arrays but the model has {}",
                self.arrays.len(),
                params.len()
            )));
        }
        for (name, t) in &self.arrays {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            if params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?} differs from model shape {:?}",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            params.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32::try_from(self.arrays.len()).map_err(overflow)?.to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&u16::try_from(name.len()).map_err(overflow)?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.shape().len()).map_err(overflow)?);
            for &d in t.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(overflow)?.to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata)?;
        out.extend_from_slice(&u32::try_from(meta.len()).map_err(overflow)?.to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not an LCN1 checkpoint".into()));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        let len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arrays, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn overflow<E>(_: E) -> Error {
    Error::Checkpoint("field does not fit the format".into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
