//! Target-side similarity retrieval of example pairs.
//!
//! The index holds the in-style (target) side of every training pair. At
//! finetuning time a pair's own target is the query and the pair itself is
//! excluded; at inference time a first-round sketch plays that role.

mod embed;
mod index;

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use embed::{
    normalize, EmbedError, Embedder, HashedTfidf, HttpEmbedder, NgramHasher, DEFAULT_DIM,
    NGRAM_MAX, NGRAM_MIN,
};
pub use index::{Hit, IndexError, VectorIndex};

use crate::dataset::PseudoPair;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("index entry {0} has no matching pair")]
    MissingPair(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    TargetSide,
    Sketch,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shot {
    pub pair: PseudoPair,
    /// Cosine similarity to the query; 0 for random shots.
    pub score: f64,
}

/// Retrieved example pairs, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSet {
    pub shots: Vec<Shot>,
    pub k: usize,
    pub query_kind: QueryKind,
}

impl ShotSet {
    pub fn empty(query_kind: QueryKind) -> Self {
        Self {
            shots: Vec::new(),
            k: 0,
            query_kind,
        }
    }

    pub fn ids(&self) -> Vec<String> {
        self.shots.iter().map(|s| s.pair.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }
}

/// Index plus the pairs it points at.
pub struct Retriever {
    embedder: Arc<dyn Embedder>,
    index: VectorIndex,
    pairs: HashMap<String, PseudoPair>,
}

impl Retriever {
    /// Embeds and indexes every pair's target side. Pairs whose target has no
    /// features are skipped with a warning.
    pub fn build(pairs: &[PseudoPair], embedder: Arc<dyn Embedder>) -> Result<Self, RetrievalError> {
        let targets: Vec<String> = pairs.iter().map(|p| p.target.clone()).collect();
        let vectors: Vec<Result<Vec<f32>, EmbedError>> = targets
            .par_chunks(256)
            .flat_map_iter(|chunk| embedder.embed_batch(chunk))
            .collect();
        let mut index = VectorIndex::new(embedder.dim(), embedder.fingerprint());
        let mut by_id = HashMap::with_capacity(pairs.len());
        for (pair, vector) in pairs.iter().zip(vectors) {
            match vector {
                Ok(v) => {
                    index.insert(pair.id.clone(), v)?;
                    by_id.insert(pair.id.clone(), pair.clone());
                }
                Err(EmbedError::ZeroVector) | Err(EmbedError::EmptyText) => {
                    warn!(id = %pair.id, "target has no features; not indexed");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(Self {
            embedder,
            index,
            pairs: by_id,
        })
    }

    pub fn from_parts(
        index: VectorIndex,
        pairs: &[PseudoPair],
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, RetrievalError> {
        let expected = embedder.fingerprint();
        if index.fingerprint() != expected {
            return Err(IndexError::FingerprintMismatch {
                expected,
                found: index.fingerprint().to_string(),
            }
            .into());
        }
        let mut by_id: HashMap<String, PseudoPair> =
            pairs.iter().map(|p| (p.id.clone(), p.clone())).collect();
        by_id.retain(|id, _| index.contains(id));
        if let Some(missing) = index.ids().iter().find(|id| !by_id.contains_key(*id)) {
            return Err(RetrievalError::MissingPair(missing.clone()));
        }
        Ok(Self {
            embedder,
            index,
            pairs: by_id,
        })
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    fn shots_from_hits(&self, hits: Vec<Hit>, k: usize, query_kind: QueryKind) -> ShotSet {
        ShotSet {
            shots: hits
                .into_iter()
                .map(|h| Shot {
                    pair: self.pairs[&h.id].clone(),
                    score: h.score,
                })
                .collect(),
            k,
            query_kind,
        }
    }

    /// Finetuning-time shots: neighbours of the pair's own target, itself excluded.
    pub fn retrieve_train_shots(&self, pair: &PseudoPair, k: usize) -> Result<ShotSet, RetrievalError> {
        let query = self.embedder.embed(&pair.target)?;
        let hits = self.index.knn(&query, k, Some(&pair.id))?;
        Ok(self.shots_from_hits(hits, k, QueryKind::TargetSide))
    }

    /// Inference-time shots: neighbours of a first-round sketch.
    pub fn retrieve_sketch_shots(&self, sketch: &str, k: usize) -> Result<ShotSet, RetrievalError> {
        let query = self.embedder.embed(sketch)?;
        let hits = self.index.knn(&query, k, None)?;
        Ok(self.shots_from_hits(hits, k, QueryKind::Sketch))
    }

    /// `k` distinct pairs drawn uniformly without replacement.
    pub fn retrieve_random_shots(&self, seed: u64, k: usize, exclude: Option<&str>) -> Result<ShotSet, RetrievalError> {
        if self.index.is_empty() {
            return Err(IndexError::Empty.into());
        }
        let ids = self.index.ids();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let take = (k + usize::from(exclude.is_some())).min(ids.len());
        let shots = rand::seq::index::sample(&mut rng, ids.len(), take)
            .into_iter()
            .map(|i| &ids[i])
            .filter(|id| Some(id.as_str()) != exclude)
            .take(k)
            .map(|id| Shot {
                pair: self.pairs[id].clone(),
                score: 0.0,
            })
            .collect();
        Ok(ShotSet {
            shots,
            k,
            query_kind: QueryKind::Random,
        })
    }
}
