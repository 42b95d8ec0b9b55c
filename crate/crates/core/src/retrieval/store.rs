//! `EMB1` embedding store.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "EMB1"
//! 4       4           dim    (u32 LE, 1..=64)
//! 8       8           count  (u64 LE)
//! 16      count * R   records, R = 8 + 4 * dim:
//!                       id (u64 LE), then dim x f32 LE
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::encoder::MAX_EMBED_DIM;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const STORE_MAGIC: &[u8; 4] = b"EMB1";
pub const STORE_HEADER_LEN: usize = 16;
/// Allowed deviation of a stored vector's L2 norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    seen: HashSet<u64>,
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || dim > MAX_EMBED_DIM {
        return Err(Error::Argument(format!(
            "embedding dim must be in [1, {MAX_EMBED_DIM}], got {dim}"
        )));
    }
    Ok(())
}

pub(crate) fn norm_f32(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            seen: HashSet::new(),
        })
    }

    pub fn with_capacity(dim: usize, capacity: usize) -> Result<Self> {
        let mut s = Self::new(dim)?;
        s.ids.reserve(capacity);
        s.vectors.reserve(capacity * dim);
        s.seen.reserve(capacity);
        Ok(s)
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

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.ids
            .iter()
            .copied()
            .zip(self.vectors.chunks_exact(self.dim))
    }

    pub fn push(&mut self, id: u64, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Argument(format!(
                "vector for id {id} has dim {}, store dim is {}",
                vector.len(),
                self.dim
            )));
        }
        let norm = norm_f32(vector);
        if norm.is_nan() || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Validation(format!(
                "vector for id {id} has norm {norm}, expected unit length"
            )));
        }
        if !self.seen.insert(id) {
            return Err(Error::Validation(format!("duplicate embedding id {id}")));
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    /// Stores an f64 unit vector at 4-byte precision.
    pub fn push_f64(&mut self, id: u64, vector: &[f64]) -> Result<()> {
        let v: Vec<f32> = vector.iter().map(|&x| x as f32).collect();
        self.push(id, &v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(STORE_HEADER_LEN + self.len() * (8 + 4 * self.dim));
        buf.extend_from_slice(STORE_MAGIC);
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
        let fail = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < STORE_HEADER_LEN {
            return Err(fail(bytes.len(), "truncated header".into()));
        }
        if &bytes[0..4] != STORE_MAGIC {
            return Err(fail(
                0,
                format!("bad magic {:?}, expected EMB1", &bytes[0..4]),
            ));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        check_dim(dim).map_err(|e| fail(4, e.to_string()))?;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let record = 8 + 4 * dim;
        let body = bytes.len() - STORE_HEADER_LEN;
        if (count as u128) * (record as u128) > body as u128 {
            let complete = body / record;
            return Err(fail(
                STORE_HEADER_LEN + complete * record,
                format!("truncated: header declares {count} records, {complete} present"),
            ));
        }
        let count = count as usize;
        let end = STORE_HEADER_LEN + count * record;
        if bytes.len() > end {
            return Err(fail(end, "trailing bytes after last record".into()));
        }
        let mut store = Self::with_capacity(dim, count)?;
        let mut v = vec![0f32; dim];
        for r in 0..count {
            let base = STORE_HEADER_LEN + r * record;
            let id = u64::from_le_bytes(bytes[base..base + 8].try_into().unwrap());
            for (d, slot) in v.iter_mut().enumerate() {
                let at = base + 8 + 4 * d;
                *slot = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            }
            store.push(id, &v).map_err(|e| fail(base, e.to_string()))?;
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

    /// Random unit vectors (normalized standard normals) with ids
    /// `first_id..first_id + count`.
    pub fn random(count: usize, dim: usize, seed: u64, first_id: u64) -> Result<Self> {
        let mut store = Self::with_capacity(dim, count)?;
        let mut rng = SeededRng::derive(seed, &[0x7261_6e64]);
        let mut v = vec![0f64; dim];
        for i in 0..count as u64 {
            loop {
                v.iter_mut().for_each(|x| *x = rng.normal());
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= n);
                    break;
                }
            }
            store.push_f64(first_id + i, &v)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let s = EmbeddingStore::random(3, 5, 1, 100).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 16 + 3 * (8 + 20));
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn empty_store_is_header_only() {
        let s = EmbeddingStore::new(64).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 16);
        assert_eq!(EmbeddingStore::from_bytes(&bytes).unwrap().len(), 0);
    }

    #[test]
    fn rejects_wide_dim_in_header() {
        let mut bytes = EmbeddingStore::new(8).unwrap().to_bytes();
        bytes[4..8].copy_from_slice(&65u32.to_le_bytes());
        assert!(matches!(
            EmbeddingStore::from_bytes(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        assert!(EmbeddingStore::new(65).is_err());
    }

    #[test]
    fn reports_offsets() {
        let s = EmbeddingStore::random(4, 3, 2, 0).unwrap();
        let bytes = s.to_bytes();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            EmbeddingStore::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        // Cut inside the third record: two complete records survive.
        let cut = 16 + 2 * 20 + 5;
        match EmbeddingStore::from_bytes(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16 + 2 * 20),
            other => panic!("unexpected {other:?}"),
        }
        assert!(EmbeddingStore::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn rejects_non_unit_and_duplicates() {
        let mut s = EmbeddingStore::new(2).unwrap();
        assert!(s.push(1, &[1.0, 1.0]).is_err());
        s.push(1, &[1.0, 0.0]).unwrap();
        assert!(s.push(1, &[0.0, 1.0]).is_err());
        assert!(s.push(2, &[1.0]).is_err());
    }
}
