use std::io::{self, Read, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{fnv1a64, sha256_hex};

pub const DEFAULT_DIM: usize = 1 << 14;
pub const NGRAM_MIN: usize = 3;
pub const NGRAM_MAX: usize = 5;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text is empty")]
    EmptyText,
    #[error("zero_vector: text produced no features")]
    ZeroVector,
    #[error("embedding service: {0}")]
    Service(String),
    #[error("expected dimension {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Identifies the vector space; indexes refuse vectors from another one.
    fn fingerprint(&self) -> String;
    /// A unit-norm vector of length `dim()`.
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;

    fn embed_batch(&self, texts: &[String]) -> Vec<Result<Vec<f32>, EmbedError>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Character 3–5-gram feature hashing over the space-padded text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NgramHasher {
    pub dim: usize,
}

impl NgramHasher {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim }
    }

    /// Sparse (bucket, count) pairs sorted by bucket. Windows without an
    /// alphanumeric character are not features.
    pub fn counts(&self, text: &str) -> Vec<(u32, f32)> {
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut buckets: Vec<u32> = Vec::new();
        let mut buf = String::new();
        for n in NGRAM_MIN..=NGRAM_MAX {
            if padded.len() < n {
                break;
            }
            for window in padded.windows(n) {
                buf.clear();
                buf.extend(window);
                if !window.iter().any(|c| c.is_alphanumeric()) {
                    continue;
                }
                buckets.push((fnv1a64(buf.as_bytes()) % self.dim as u64) as u32);
            }
        }
        buckets.sort_unstable();
        let mut out: Vec<(u32, f32)> = Vec::new();
        for b in buckets {
            match out.last_mut() {
                Some((last, count)) if *last == b => *count += 1.0,
                _ => out.push((b, 1.0)),
            }
        }
        out
    }

    /// L2-normalized sparse counts; empty when the text has no n-grams.
    pub fn normalized(&self, text: &str) -> Vec<(u32, f32)> {
        let mut counts = self.counts(text);
        let norm = counts.iter().map(|(_, c)| c * c).sum::<f32>().sqrt();
        if norm > 0.0 {
            for (_, c) in &mut counts {
                *c /= norm;
            }
        }
        counts
    }
}

/// TF-IDF over hashed character n-grams. Unfitted, every idf weight is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedTfidf {
    hasher: NgramHasher,
    idf: Vec<f32>,
    documents: u64,
}

const EMBEDDER_MAGIC: &[u8; 4] = b"SPEM";

impl HashedTfidf {
    pub fn unfitted(dim: usize) -> Self {
        Self {
            hasher: NgramHasher::new(dim),
            idf: vec![1.0; dim],
            documents: 0,
        }
    }

    /// Smoothed idf: ln((1 + N) / (1 + df)) + 1.
    pub fn fit<S: AsRef<str>>(dim: usize, documents: &[S]) -> Self {
        let hasher = NgramHasher::new(dim);
        let mut df = vec![0u64; dim];
        for doc in documents {
            for (bucket, _) in hasher.counts(doc.as_ref()) {
                df[bucket as usize] += 1;
            }
        }
        let n = documents.len() as f64;
        let idf = df
            .iter()
            .map(|&d| (((1.0 + n) / (1.0 + d as f64)).ln() + 1.0) as f32)
            .collect();
        Self {
            hasher,
            idf,
            documents: documents.len() as u64,
        }
    }

    pub fn hasher(&self) -> NgramHasher {
        self.hasher
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut out = Vec::with_capacity(16 + self.idf.len() * 4);
        out.extend_from_slice(EMBEDDER_MAGIC);
        out.extend_from_slice(&(self.hasher.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.documents.to_le_bytes());
        for w in &self.idf {
            out.extend_from_slice(&w.to_le_bytes());
        }
        std::fs::File::create(path)?.write_all(&out)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != EMBEDDER_MAGIC {
            return Err(bad("not an embedder file"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let documents = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if dim == 0 || bytes.len() != 16 + dim * 4 {
            return Err(bad("truncated idf table"));
        }
        let idf = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            hasher: NgramHasher::new(dim),
            idf,
            documents,
        })
    }
}

impl Embedder for HashedTfidf {
    fn dim(&self) -> usize {
        self.hasher.dim
    }

    fn fingerprint(&self) -> String {
        let mut idf_bytes = Vec::with_capacity(self.idf.len() * 4);
        for w in &self.idf {
            idf_bytes.extend_from_slice(&w.to_le_bytes());
        }
        format!(
            "hashed_tfidf:char{NGRAM_MIN}-{NGRAM_MAX}:fnv1a64:dim={}:docs={}:idf={}",
            self.hasher.dim,
            self.documents,
            &sha256_hex(&idf_bytes)[..16]
        )
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut dense = vec![0f32; self.hasher.dim];
        for (bucket, count) in self.hasher.counts(text) {
            dense[bucket as usize] = count * self.idf[bucket as usize];
        }
        normalize(&mut dense).ok_or(EmbedError::ZeroVector)?;
        Ok(dense)
    }
}

/// Scales to unit L2 norm; `None` for zero or non-finite vectors.
pub fn normalize(v: &mut [f32]) -> Option<()> {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    Some(())
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// External embedding service: `POST {"texts":[...]} -> {"vectors":[[...]]}`.
pub struct HttpEmbedder {
    endpoint: String,
    model_tag: String,
    dim: usize,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, model_tag: impl Into<String>, dim: usize) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model_tag: model_tag.into(),
            dim,
            client,
        })
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(&EmbedRequest { texts })
            .send()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        if response.status() != reqwest::StatusCode::OK {
            return Err(EmbedError::Service(format!("HTTP {}", response.status().as_u16())));
        }
        let body: EmbedResponse = response
            .json()
            .map_err(|e| EmbedError::Service(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbedError::Service(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        Ok(body.vectors)
    }

    fn finish(&self, mut v: Vec<f32>) -> Result<Vec<f32>, EmbedError> {
        if v.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        normalize(&mut v).ok_or(EmbedError::ZeroVector)?;
        Ok(v)
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("http_service:{}:dim={}", self.model_tag, self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()]);
        out.pop().expect("one result")
    }

    fn embed_batch(&self, texts: &[String]) -> Vec<Result<Vec<f32>, EmbedError>> {
        if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
            return (0..texts.len())
                .map(|i| {
                    if i == pos {
                        Err(EmbedError::EmptyText)
                    } else {
                        Err(EmbedError::Service("batch rejected: empty input".into()))
                    }
                })
                .collect();
        }
        match self.request(texts) {
            Ok(vectors) => vectors.into_iter().map(|v| self.finish(v)).collect(),
            Err(e) => {
                let msg = e.to_string();
                texts.iter().map(|_| Err(EmbedError::Service(msg.clone()))).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let e = HashedTfidf::unfitted(DEFAULT_DIM);
        let a = e.embed("abc").unwrap();
        assert_eq!(a, e.embed("abc").unwrap());
        assert!((dot(&a, &a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn featureless_text_is_zero_vector() {
        let e = HashedTfidf::unfitted(64);
        assert!(matches!(e.embed("... !?"), Err(EmbedError::ZeroVector)));
        assert!(e.embed("a").is_ok());
        assert!(matches!(e.embed("  "), Err(EmbedError::EmptyText)));
    }

    #[test]
    fn ngram_counts_for_short_text() {
        // " ab " -> " ab", "ab ", " ab " : three n-grams.
        let h = NgramHasher::new(1 << 20);
        let total: f32 = h.counts("ab").iter().map(|(_, c)| c).sum();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn idf_downweights_common_ngrams() {
        let docs = ["the tax form", "the tax return", "the refund"];
        let e = HashedTfidf::fit(1 << 16, &docs);
        let the = e.hasher.counts("the")[0].0 as usize;
        let refund = e.hasher.counts("refund").last().unwrap().0 as usize;
        assert!(e.idf[the] < e.idf[refund]);
        assert_ne!(e.fingerprint(), HashedTfidf::unfitted(1 << 16).fingerprint());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let e = HashedTfidf::fit(128, &["alpha beta", "gamma"]);
        e.save(&path).unwrap();
        let loaded = HashedTfidf::load(&path).unwrap();
        assert_eq!(loaded, e);
        assert_eq!(loaded.fingerprint(), e.fingerprint());
    }

    proptest! {
        #[test]
        fn self_cosine_is_one(text in "[ -~]{3,60}") {
            prop_assume!(text.chars().any(char::is_alphanumeric));
            let e = HashedTfidf::unfitted(DEFAULT_DIM);
            let v = e.embed(&text).unwrap();
            prop_assert!((dot(&v, &v) - 1.0).abs() < 1e-6);
        }
    }
}
