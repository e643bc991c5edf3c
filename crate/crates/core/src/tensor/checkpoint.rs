//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "MTXLCKPT"
//! version   u32
//! dtype     u8       4 = f32, 8 = f64
//! meta_len  u32      followed by meta_len bytes of UTF-8 (JSON by convention)
//! count     u32
//! count × { name_len u32, name bytes, ndim u32, dims u64 × ndim, values }
//! ```

use std::io;
use std::path::Path;

use thiserror::Error;

use super::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MTXLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds dtype {found}, expected {expected}")]
    Dtype { expected: u8, found: u8 },
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("invalid tensor entry {0:?}")]
    Entry(String),
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, CheckpointError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(CheckpointError::Dtype {
                expected: T::DTYPE,
                found: dtype,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| CheckpointError::Entry("<meta>".into()))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Entry("<non-utf8 name>".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let width = T::DTYPE as usize;
            let raw = r.take(n.checked_mul(width).ok_or_else(|| CheckpointError::Entry(name.clone()))?)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Entry(name.clone()))?;
            tensors.push((name, t));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        crate::fsutil::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
