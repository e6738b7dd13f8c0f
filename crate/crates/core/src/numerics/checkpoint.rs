//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes   "USJCKPT1"
//! meta_len    u32       length of the JSON metadata record
//! meta        bytes     {"config_hash", "epoch", "val_loss", "extra"}
//! count       u32       number of entries
//! entry*      name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!             ndim u32, dims u64 * ndim, raw values
//! ```
//!
//! Entries appear in parameter insertion order, so identical weights always
//! serialize to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::real::{DType, Real};
use super::tensor::Tensor;
use super::NumericsError;

const MAGIC: &[u8; 8] = b"USJCKPT1";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: u64,
    pub val_loss: Option<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub raw: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let mut raw = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut raw);
        }
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            raw,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = match self.dtype {
            DType::F32 => self
                .raw
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::read_le(b) as f64))
                .collect(),
            DType::F64 => self
                .raw
                .chunks_exact(8)
                .map(|b| T::from_f64(f64::read_le(b)))
                .collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Self {
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push_store<T: Real>(&mut self, store: &ParamStore<T>) {
        for p in store.iter() {
            self.entries.push(Entry::from_tensor(&p.name, &p.value));
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies entries into `store`; `rename` maps a store name to the entry
    /// name it should be read from. Every store parameter must be found.
    pub fn restore_into<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        rename: impl Fn(&str) -> String,
    ) -> Result<(), NumericsError> {
        for p in store.iter_mut() {
            let key = rename(&p.name);
            let entry = self
                .entry(&key)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing entry {key}")))?;
            if entry.shape != p.value.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "entry {key} has shape {:?}, expected {:?}",
                    entry.shape,
                    p.value.shape()
                )));
            }
            p.value = entry.to_tensor();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.code());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.raw);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NumericsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NumericsError::Checkpoint("bad magic".into()));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| NumericsError::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| NumericsError::Checkpoint("entry name is not utf-8".into()))?;
            let dtype = DType::from_code(r.take(1)?[0])
                .ok_or_else(|| NumericsError::Checkpoint(format!("unknown dtype for {name}")))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let raw = r.take(shape.iter().product::<usize>() * dtype.size())?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                raw,
            });
        }
        if r.pos != bytes.len() {
            return Err(NumericsError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { meta, entries })
    }

    pub fn write(&self, path: &Path) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumericsError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NumericsError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumericsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumericsError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
