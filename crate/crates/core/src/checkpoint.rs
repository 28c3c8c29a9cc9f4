//! Binary checkpoint files.
//!
//! | field | encoding |
//! |---|---|
//! | magic | `OCAD` |
//! | version | u32 LE, currently 1 |
//! | header | u32 LE byte length, then compact JSON ([`CheckpointHeader`]) |
//! | records | u32 LE count, then per record: u32 name length, UTF-8 name, u32 rank, rank x u32 extents, f32 LE values |
//!
//! Model parameters come first in registration order. When optimizer state is
//! saved it follows as `adamw.m/<name>` and `adamw.v/<name>` records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canvas::CanvasLayout;
use crate::error::{Error, Result};
use crate::mae::{param_shapes, MaeModel, ModelConfig};
use crate::nn::{ParamStore, Tensor};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"OCAD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub layout: CanvasLayout,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
    /// `Some` when AdamW moments are stored.
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamWConfig,
    pub step: u64,
}

/// A model with its training position and, optionally, optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: MaeModel<T>,
    pub optimizer: Option<AdamW<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &e in shape {
        put_u32(out, e)?;
    }
    for &x in data {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.model = self.model.config().clone();
        header.optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader { config: o.config, step: o.step });
        let json = serde_json::to_vec(&header)?;
        let params = self.model.params();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * params.scalar_count() * 3);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        let n = params.len() * if self.optimizer.is_some() { 3 } else { 1 };
        put_u32(&mut out, n)?;
        for p in params.iter() {
            put_record(&mut out, &p.name, p.value.shape(), p.value.data())?;
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("adamw.m", &opt.m), ("adamw.v", &opt.v)] {
                for (p, m) in params.iter().zip(moments) {
                    put_record(&mut out, &format!("{prefix}/{}", p.name), p.value.shape(), m)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing OCAD magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.model.validate()?;
        header.model.check_layout(&header.layout)?;
        let expected = param_shapes(&header.model);
        let want = expected.len() * if header.optimizer.is_some() { 3 } else { 1 };
        let count = r.u32()? as usize;
        if count != want {
            return Err(Error::Checkpoint(format!("{count} records, header implies {want}")));
        }
        let mut read_group = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            expected
                .iter()
                .map(|(name, shape)| {
                    let want_name = if prefix.is_empty() { name.clone() } else { format!("{prefix}/{name}") };
                    let (got_name, got_shape, data) = r.record()?;
                    if got_name != want_name || got_shape != *shape {
                        return Err(Error::Checkpoint(format!(
                            "record {got_name:?} {got_shape:?} where {want_name:?} {shape:?} was expected"
                        )));
                    }
                    Tensor::new(shape, data)
                })
                .collect()
        };
        let values = read_group("")?;
        let optimizer = match header.optimizer {
            Some(oh) => {
                let m = read_group("adamw.m")?.into_iter().map(Tensor::into_data).collect();
                let v = read_group("adamw.v")?.into_iter().map(Tensor::into_data).collect();
                Some(AdamW { config: oh.config, step: oh.step, m, v })
            }
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut store = ParamStore::new();
        for ((name, _), value) in expected.into_iter().zip(values) {
            store.register(name, value)?;
        }
        let model = MaeModel::from_params(header.model.clone(), store)?;
        Ok(Self { header, model, optimizer })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn record<T: Scalar>(&mut self) -> Result<(String, Vec<usize>, Vec<T>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("record too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)).collect();
        Ok((name, shape, data))
    }
}
