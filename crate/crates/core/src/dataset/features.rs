//! Raw feature vectors keyed by sample id.
//!
//! File layout (`FEA1`): 4-byte magic, u32 LE `dim`, u64 LE `count`, then per
//! record a u64 LE id followed by `dim` little-endian f64 values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEA1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<u64>,
    values: Vec<f64>,
    lookup: HashMap<u64, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn push(&mut self, id: u64, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Argument(format!(
                "feature {id} has {} values, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        if self.lookup.insert(id, self.ids.len()).is_some() {
            return Err(Error::Validation(format!("duplicate feature id {id}")));
        }
        self.ids.push(id);
        self.values.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: u64) -> Option<&[f64]> {
        self.lookup
            .get(&id)
            .map(|&row| &self.values[row * self.dim..(row + 1) * self.dim])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.ids
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim.max(1)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.len() * (8 + 8 * self.dim));
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in self.iter() {
            buf.extend_from_slice(&id.to_le_bytes());
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |offset: usize| Error::Format {
            offset: offset as u64,
            msg: "truncated feature store".into(),
        };
        if bytes.len() < 16 {
            return Err(truncated(bytes.len()));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}, expected FEA1", &bytes[0..4]),
            });
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let record = 8 + 8 * dim;
        let expected = count
            .checked_mul(record)
            .and_then(|n| n.checked_add(16))
            .ok_or_else(|| truncated(8))?;
        if bytes.len() < expected {
            return Err(truncated(bytes.len()));
        }
        if bytes.len() > expected {
            return Err(Error::Format {
                offset: expected as u64,
                msg: "trailing bytes after last record".into(),
            });
        }
        let mut store = FeatureStore::new(dim);
        store.ids.reserve(count);
        store.values.reserve(count * dim);
        let mut vector = vec![0.0; dim];
        for r in 0..count {
            let base = 16 + r * record;
            let id = u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
            for (d, slot) in vector.iter_mut().enumerate() {
                let at = base + 8 + 8 * d;
                *slot = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            }
            store.push(id, &vector).map_err(|e| Error::Format {
                offset: base as u64,
                msg: e.to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
