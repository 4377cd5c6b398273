use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use super::embed::normalize;

const INDEX_MAGIC: &[u8; 4] = b"SPIX";
const INDEX_VERSION: u32 = 1;
/// Below this many rows scoring stays on the calling thread.
const PARALLEL_ROWS: usize = 4096;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index is empty")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("zero or non-finite vector for {0}")]
    ZeroVector(String),
    #[error("expected dimension {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("embedder fingerprint mismatch: index has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// Exact flat cosine index over unit-normalized rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    fingerprint: String,
    ids: Vec<String>,
    rows: Vec<f32>,
    positions: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(dim: usize, fingerprint: impl Into<String>) -> Self {
        Self {
            dim,
            fingerprint: fingerprint.into(),
            ids: Vec::new(),
            rows: Vec::new(),
            positions: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        let pos = *self.positions.get(id)?;
        Some(&self.rows[pos * self.dim..(pos + 1) * self.dim])
    }

    /// Adds a row, normalizing it to unit length.
    pub fn insert(&mut self, id: impl Into<String>, mut vector: Vec<f32>) -> Result<(), IndexError> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if self.positions.contains_key(&id) {
            return Err(IndexError::DuplicateId(id));
        }
        if vector.iter().any(|x| !x.is_finite()) || normalize(&mut vector).is_none() {
            return Err(IndexError::ZeroVector(id));
        }
        self.positions.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.extend_from_slice(&vector);
        Ok(())
    }

    /// Exact top-k by cosine similarity. Ties go to the smaller id. Returns
    /// fewer than `k` hits only when the index (minus `exclude`) is smaller.
    pub fn knn(&self, query: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<Hit>, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let mut q = query.to_vec();
        if q.iter().any(|x| !x.is_finite()) || normalize(&mut q).is_none() {
            return Err(IndexError::ZeroVector("query".into()));
        }
        let excluded = exclude.and_then(|id| self.positions.get(id)).copied();

        let score = |row: usize| -> f64 {
            self.rows[row * self.dim..(row + 1) * self.dim]
                .iter()
                .zip(&q)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum()
        };
        let mut scored: Vec<(usize, f64)> = if self.len() >= PARALLEL_ROWS {
            (0..self.len())
                .into_par_iter()
                .filter(|&r| Some(r) != excluded)
                .map(|r| (r, score(r)))
                .collect()
        } else {
            (0..self.len())
                .filter(|&r| Some(r) != excluded)
                .map(|r| (r, score(r)))
                .collect()
        };

        let order = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(order);
        Ok(scored
            .into_iter()
            .map(|(r, s)| Hit {
                id: self.ids[r].clone(),
                score: s.clamp(-1.0, 1.0),
            })
            .collect())
    }

    /// Layout: magic, version, dim (u32), count (u64), fingerprint (u32 length
    /// + bytes), ids (u32 length + bytes each), then row-major f32 vectors.
    /// All integers and floats little-endian.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let mut out = Vec::with_capacity(64 + self.rows.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        write_str(&mut out, &self.fingerprint);
        for id in &self.ids {
            write_str(&mut out, id);
        }
        for x in &self.rows {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_fingerprint: &str) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != INDEX_MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != INDEX_VERSION {
            return Err(IndexError::Corrupt(format!("unsupported version {version}")));
        }
        let dim = cur.u32()? as usize;
        let count = cur.u64()? as usize;
        let fingerprint = cur.string()?;
        if fingerprint != expected_fingerprint {
            return Err(IndexError::FingerprintMismatch {
                expected: expected_fingerprint.to_string(),
                found: fingerprint,
            });
        }
        let mut index = VectorIndex::new(dim, fingerprint);
        let mut ids = Vec::with_capacity(count.min(1 << 24));
        for _ in 0..count {
            ids.push(cur.string()?);
        }
        let body = cur.take(count * dim * 4)?;
        if cur.pos != bytes.len() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        index.rows = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        for (pos, id) in ids.iter().enumerate() {
            if index.positions.insert(id.clone(), pos).is_some() {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        index.ids = ids;
        Ok(index)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| IndexError::Corrupt("truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, IndexError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| IndexError::Corrupt("non-UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (VectorIndex, Vec<Vec<f32>>) {
        let mut index = VectorIndex::new(dim, "test");
        let mut raw = Vec::new();
        for i in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            index.insert(format!("e{i:04}"), v.clone()).unwrap();
            raw.push(v);
        }
        (index, raw)
    }

    #[test]
    fn self_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (index, raw) = random_index(&mut rng, 20, 8);
        let hits = index.knn(&raw[3], 5, Some("e0003")).unwrap();
        assert!(hits.iter().all(|h| h.id != "e0003"));
        let hits = index.knn(&raw[3], 1, None).unwrap();
        assert_eq!(hits[0].id, "e0003");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncation_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (index, raw) = random_index(&mut rng, 3, 4);
        assert_eq!(index.knn(&raw[0], 5, None).unwrap().len(), 3);
        assert_eq!(index.knn(&raw[0], 5, Some("e0000")).unwrap().len(), 2);
        assert!(matches!(index.knn(&raw[0], 0, None), Err(IndexError::ZeroK)));
        assert!(matches!(
            VectorIndex::new(4, "x").knn(&raw[0], 1, None),
            Err(IndexError::Empty)
        ));
        let mut idx = VectorIndex::new(2, "x");
        assert!(matches!(idx.insert("z", vec![0.0, 0.0]), Err(IndexError::ZeroVector(_))));
        idx.insert("a", vec![1.0, 0.0]).unwrap();
        assert!(matches!(idx.insert("a", vec![0.0, 1.0]), Err(IndexError::DuplicateId(_))));
        assert!(matches!(idx.insert("b", vec![1.0]), Err(IndexError::DimMismatch { .. })));
    }

    #[test]
    fn ties_break_by_id() {
        let mut idx = VectorIndex::new(2, "x");
        idx.insert("c", vec![1.0, 0.0]).unwrap();
        idx.insert("a", vec![2.0, 0.0]).unwrap();
        idx.insert("b", vec![0.0, 1.0]).unwrap();
        let ids: Vec<_> = idx.knn(&[1.0, 0.0], 3, None).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, vec!["a", "c", "b"]);
    }

    #[test]
    fn persistence_and_fingerprint_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.idx");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (index, _) = random_index(&mut rng, 10, 6);
        index.save(&path).unwrap();
        assert_eq!(VectorIndex::load(&path, "test").unwrap(), index);
        assert!(matches!(
            VectorIndex::load(&path, "other"),
            Err(IndexError::FingerprintMismatch { .. })
        ));
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(VectorIndex::load(&path, "test"), Err(IndexError::Corrupt(_))));
    }
}
