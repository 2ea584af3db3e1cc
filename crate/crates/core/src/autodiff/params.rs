//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DDIMCKPT"
//! version      u32
//! meta_len     u64, followed by meta_len bytes of UTF-8 JSON metadata
//! count        u64
//! per tensor:  name_len u64, name bytes (UTF-8), ndim u64,
//!              ndim x u64 dims, prod(dims) x f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use super::{AdError, Array, Gradients, Tape, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDIMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Upper bound on any single length field, to reject corrupt headers early.
const MAX_FIELD: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("metadata is not valid JSON: {0}")]
    Metadata(#[from] serde_json::Error),
}

/// Ordered map from parameter name to value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Array>,
}

/// Tape handles for every parameter of a store, by name.
#[derive(Debug, Clone, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, AdError> {
        self.vars.get(name).copied().ok_or_else(|| AdError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.len() == other.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.params.iter().map(|(k, v)| (k.clone(), tape.param(v.clone()))).collect(),
        }
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect(),
        }
    }

    /// Gradients for each parameter; zeros where the output did not depend on it.
    pub fn gradients(&self, vars: &ParamVars, grads: &Gradients) -> ParamStore {
        let params = self
            .params
            .iter()
            .map(|(k, v)| {
                let g = vars
                    .vars
                    .get(k)
                    .and_then(|var| grads.get(*var))
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect();
        ParamStore { params }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Array::is_finite)
    }

    pub fn to_bytes(&self, metadata: &serde_json::Value) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = metadata.to_string();
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, value) in &self.params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.ndim() as u64).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = read_len(&mut r)?;
        let meta: serde_json::Value = serde_json::from_slice(take_slice(&mut r, meta_len)?)?;
        let count = read_len(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_len(&mut r)?;
            let name = std::str::from_utf8(take_slice(&mut r, name_len)?)
                .map_err(|e| CheckpointError::Corrupt(format!("parameter name: {e}")))?
                .to_string();
            let ndim = read_len(&mut r)?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_len(&mut r)?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| CheckpointError::Corrupt(format!("`{name}` shape {shape:?} exceeds file")))?;
            let data = take_slice(&mut r, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Array::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("`{name}`: {e}")))?;
            if store.params.insert(name.clone(), value).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate parameter `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", r.len())));
        }
        Ok((store, meta))
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("unexpected end of data".into()))?;
    Ok(buf)
}

fn take_slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if r.len() < n {
        return Err(CheckpointError::Corrupt("unexpected end of data".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_len(r: &mut &[u8]) -> Result<usize, CheckpointError> {
    let v = u64::from_le_bytes(take(r)?);
    if v > MAX_FIELD {
        return Err(CheckpointError::Corrupt(format!("length field {v} out of range")));
    }
    Ok(v as usize)
}

pub fn write_checkpoint(path: &Path, params: &ParamStore, metadata: &serde_json::Value) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&params.to_bytes(metadata))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    ParamStore::from_bytes(&std::fs::read(path)?)
}
