//! Versioned little-endian container of named tensors.
//!
//! ```text
//! magic     8 bytes  "DCNETCKP"
//! version   u32
//! meta_len  u32, then meta_len bytes of JSON
//! count     u32
//! count x { name_len u32, name bytes, dtype u8 (0 = f32, 1 = f64),
//!           ndim u32, ndim x u64 extents, elements }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::network::{Network, StateSlot};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"DCNETCKP";
pub const VERSION: u32 = 1;

/// One stored tensor. Values are held in `f64`, which represents both element
/// types exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

/// How strictly [`Checkpoint::apply`] matches names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Every network slot must be present with the same shape, and nothing else.
    Exact,
    /// Load whatever matches by name and shape; skip the rest.
    Matching,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<String>,
}

impl Checkpoint {
    pub fn from_network<T: Real>(net: &mut Network<T>, metadata: serde_json::Value) -> Self {
        let tensors = net
            .state_slots()
            .into_iter()
            .filter_map(|(name, slot)| match slot {
                StateSlot::Tensor(t) => Some(NamedTensor {
                    name,
                    dtype: T::DTYPE,
                    shape: t.shape().to_vec(),
                    data: t.to_f64_vec(),
                }),
                StateSlot::Scalar(v) => v.map(|v| NamedTensor {
                    name,
                    dtype: T::DTYPE,
                    shape: vec![1],
                    data: vec![v.as_f64()],
                }),
            })
            .collect();
        Self { metadata, tensors }
    }

    pub fn apply<T: Real>(&self, net: &mut Network<T>, mode: LoadMode) -> Result<LoadReport> {
        let mut by_name: BTreeMap<&str, &NamedTensor> = BTreeMap::new();
        for t in &self.tensors {
            if by_name.insert(&t.name, t).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", t.name)));
            }
        }
        let mut report = LoadReport::default();
        let mut used = 0;
        for (name, slot) in net.state_slots() {
            let stored = by_name.get(name.as_str()).copied();
            match (slot, stored) {
                (StateSlot::Tensor(t), Some(s)) if t.shape() == &s.shape[..] => {
                    *t = Tensor::new(&s.shape, s.data.iter().map(|&v| T::of(v)).collect())?;
                    used += 1;
                    report.loaded.push(name);
                }
                (StateSlot::Scalar(v), Some(s)) if s.shape == [1] => {
                    *v = Some(T::of(s.data[0]));
                    used += 1;
                    report.loaded.push(name);
                }
                (StateSlot::Scalar(v), None) if mode == LoadMode::Exact => {
                    *v = None;
                }
                (_, Some(s)) if mode == LoadMode::Exact => {
                    return Err(Error::Format(format!(
                        "`{name}` has shape {:?} in the checkpoint, which does not fit the network",
                        s.shape
                    )));
                }
                (_, None) if mode == LoadMode::Exact => {
                    return Err(Error::Format(format!("checkpoint has no `{name}`")));
                }
                _ => report.skipped.push(name),
            }
        }
        if mode == LoadMode::Exact && used != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors the network does not use",
                self.tensors.len() - used
            )));
        }
        Ok(report)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&len_u32(self.tensors.len())?.to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&len_u32(t.name.len())?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.dtype {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.extend_from_slice(&len_u32(t.shape.len())?.to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                match t.dtype {
                    DType::F32 => (v as f32).write_le(&mut out),
                    DType::F64 => v.write_le(&mut out),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta_len = r.u32()? as usize;
        let metadata =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(e.to_string()))?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
            };
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = r.u64()?;
                shape.push(
                    usize::try_from(d)
                        .map_err(|_| Error::Format(format!("extent {d} too large")))?,
                );
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
            let width = dtype.byte_width();
            let raw = r.take(
                n.checked_mul(width)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(width)
                .map(|c| match dtype {
                    DType::F32 => f32::read_le(c) as f64,
                    DType::F64 => f64::read_le(c),
                })
                .collect();
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
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
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
