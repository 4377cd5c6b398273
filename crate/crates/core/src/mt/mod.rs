//! Translation backends behind one client, and pivot roundtrips.

mod backend;
mod cache;

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

pub use backend::{
    scramble, token_permutation, BackendError, HttpTranslator, IdentityTranslator,
    ScrambleConfig, ScrambleTranslator, Translator,
};
pub use cache::{cache_key, CacheKey, TranslationCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MtKind {
    Http { endpoint: String },
    MockIdentity,
    MockScramble(ScrambleConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtBackendSpec {
    pub backend_id: String,
    #[serde(flatten)]
    pub kind: MtKind,
    pub src_lang: String,
    pub tgt_lang: String,
    #[serde(default)]
    pub model_tag: String,
}

impl MtBackendSpec {
    pub fn validate(&self) -> Result<(), MtError> {
        if self.backend_id.is_empty() {
            return Err(MtError::InvalidSpec("backend_id is empty".into()));
        }
        if self.src_lang == self.tgt_lang {
            return Err(MtError::InvalidSpec(format!(
                "{}: src_lang and tgt_lang are both {}",
                self.backend_id, self.src_lang
            )));
        }
        if let MtKind::Http { endpoint } = &self.kind {
            if endpoint.trim().is_empty() {
                return Err(MtError::InvalidSpec(format!(
                    "{}: http backend needs an endpoint",
                    self.backend_id
                )));
            }
        }
        Ok(())
    }

    /// Instantiates the backend this spec describes.
    pub fn connect(&self, api_key: Option<String>) -> Result<Arc<dyn Translator>, MtError> {
        self.validate()?;
        Ok(match &self.kind {
            MtKind::Http { endpoint } => Arc::new(
                HttpTranslator::new(endpoint.clone(), api_key)
                    .map_err(|e| MtError::InvalidSpec(e.to_string()))?,
            ),
            MtKind::MockIdentity => Arc::new(IdentityTranslator),
            MtKind::MockScramble(config) => Arc::new(ScrambleTranslator::new(config.clone())),
        })
    }
}

#[derive(Debug, Error)]
pub enum MtError {
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("input {0} is empty")]
    EmptyText(usize),
    #[error("no backends configured for pivot {0}")]
    UnknownPivot(String),
    #[error("cache write failed: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay.mul_f64(f64::from(1u32 << attempt.min(16)));
        if self.jitter {
            base.mul_f64(1.0 + rand::rng().random_range(0.0..0.25))
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translated {
    pub text: String,
    pub cache_hit: bool,
}

/// Per-item failure marker; the rest of the batch is unaffected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ItemFailure(pub BackendError);

pub type ItemResult = Result<Translated, ItemFailure>;

/// A backend with caching, batching, bounded concurrency and retry.
pub struct MtClient {
    spec: MtBackendSpec,
    backend: Arc<dyn Translator>,
    cache: Arc<TranslationCache>,
    retry: RetryPolicy,
    batch_size: usize,
    max_in_flight: usize,
    calls: AtomicU64,
}

impl MtClient {
    pub fn new(
        spec: MtBackendSpec,
        backend: Arc<dyn Translator>,
        cache: Arc<TranslationCache>,
    ) -> Result<Self, MtError> {
        spec.validate()?;
        Ok(Self {
            spec,
            backend,
            cache,
            retry: RetryPolicy::default(),
            batch_size: 32,
            max_in_flight: 4,
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_spec(
        spec: MtBackendSpec,
        cache: Arc<TranslationCache>,
        api_key: Option<String>,
    ) -> Result<Self, MtError> {
        let backend = spec.connect(api_key)?;
        Self::new(spec, backend, cache)
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn with_max_in_flight(mut self, max_in_flight: usize) -> Self {
        self.max_in_flight = max_in_flight.max(1);
        self
    }

    pub fn spec(&self) -> &MtBackendSpec {
        &self.spec
    }

    /// Backend requests issued so far, retries included.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn translate(&self, batch: &[String]) -> Result<Vec<ItemResult>, MtError> {
        if batch.is_empty() {
            return Err(MtError::EmptyBatch);
        }
        if let Some(pos) = batch.iter().position(|t| t.trim().is_empty()) {
            return Err(MtError::EmptyText(pos));
        }

        let keys: Vec<CacheKey> = batch
            .iter()
            .map(|t| cache_key(&self.spec.backend_id, &self.spec.model_tag, t))
            .collect();
        let mut results: Vec<Option<ItemResult>> = keys
            .iter()
            .map(|k| {
                self.cache.get(k).map(|text| {
                    Ok(Translated {
                        text,
                        cache_hit: true,
                    })
                })
            })
            .collect();

        // Distinct missing texts, first occurrence order.
        let mut pending: Vec<usize> = Vec::new();
        let mut seen: HashMap<&CacheKey, ()> = HashMap::new();
        for (i, slot) in results.iter().enumerate() {
            if slot.is_none() && seen.insert(&keys[i], ()).is_none() {
                pending.push(i);
            }
        }
        if !pending.is_empty() {
            let fetched = self.fetch(batch, &pending)?;
            let by_key: HashMap<CacheKey, Result<String, BackendError>> = pending
                .iter()
                .zip(fetched)
                .map(|(&i, r)| (keys[i], r))
                .collect();
            for (i, slot) in results.iter_mut().enumerate() {
                if slot.is_none() {
                    *slot = Some(match &by_key[&keys[i]] {
                        Ok(text) => Ok(Translated {
                            text: text.clone(),
                            cache_hit: false,
                        }),
                        Err(e) => Err(ItemFailure(e.clone())),
                    });
                }
            }
        }
        Ok(results.into_iter().map(|r| r.expect("filled")).collect())
    }

    fn fetch(
        &self,
        batch: &[String],
        pending: &[usize],
    ) -> Result<Vec<Result<String, BackendError>>, MtError> {
        let chunks: Vec<Vec<String>> = pending
            .chunks(self.batch_size)
            .map(|c| c.iter().map(|&i| batch[i].clone()).collect())
            .collect();
        let outputs: Vec<Mutex<Option<Result<Vec<String>, BackendError>>>> =
            chunks.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(chunks.len());
        let work = || loop {
            let idx = next.fetch_add(1, Ordering::Relaxed);
            if idx >= chunks.len() {
                break;
            }
            let result = self.call_with_retry(&chunks[idx]);
            *outputs[idx].lock().expect("poisoned") = Some(result);
        };
        if workers <= 1 {
            work();
        } else {
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(work);
                }
            });
        }

        let mut flat = Vec::with_capacity(pending.len());
        for (chunk, output) in chunks.iter().zip(outputs) {
            match output.into_inner().expect("poisoned").expect("chunk ran") {
                Ok(translations) => {
                    for (text, translation) in chunk.iter().zip(translations) {
                        let key = cache_key(&self.spec.backend_id, &self.spec.model_tag, text);
                        self.cache.insert(key, translation.clone())?;
                        flat.push(Ok(translation));
                    }
                }
                Err(e) => {
                    warn!(backend = %self.spec.backend_id, error = %e, items = chunk.len(), "batch failed");
                    flat.extend(chunk.iter().map(|_| Err(e.clone())));
                }
            }
        }
        Ok(flat)
    }

    fn call_with_retry(&self, texts: &[String]) -> Result<Vec<String>, BackendError> {
        let mut last = BackendError::Transport("no attempt made".into());
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self
                .backend
                .translate_batch(&self.spec.src_lang, &self.spec.tgt_lang, texts)
            {
                Ok(out) if out.len() == texts.len() => return Ok(out),
                Ok(out) => {
                    last = BackendError::Malformed(format!(
                        "expected {} outputs, got {}",
                        texts.len(),
                        out.len()
                    ))
                }
                Err(e) => last = e,
            }
            debug!(backend = %self.spec.backend_id, attempt, error = %last, "retrying");
        }
        Err(last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundtripStage {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundtripResult {
    pub original: String,
    pub pivot_text: String,
    pub neutral: String,
    pub pivot_lang: String,
    pub forward_backend: String,
    pub backward_backend: String,
    pub cache_hit: (bool, bool),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{stage:?} translation failed for {original:?}: {message}")]
pub struct RoundtripError {
    pub stage: RoundtripStage,
    pub original: String,
    pub message: String,
}

/// The en→pivot and pivot→en clients for one pivot language.
pub struct PivotPair {
    pub forward: MtClient,
    pub backward: MtClient,
}

#[derive(Default)]
pub struct MtGateway {
    pivots: BTreeMap<String, PivotPair>,
}

impl MtGateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_pivot(&mut self, pivot: &str, forward: MtClient, backward: MtClient) -> Result<(), MtError> {
        let (f, b) = (forward.spec(), backward.spec());
        if f.tgt_lang != pivot || b.src_lang != pivot || f.src_lang != b.tgt_lang {
            return Err(MtError::InvalidSpec(format!(
                "pivot {pivot}: forward {}→{} and backward {}→{} do not form a roundtrip",
                f.src_lang, f.tgt_lang, b.src_lang, b.tgt_lang
            )));
        }
        self.pivots
            .insert(pivot.to_string(), PivotPair { forward, backward });
        Ok(())
    }

    pub fn pivots(&self) -> impl Iterator<Item = &str> {
        self.pivots.keys().map(String::as_str)
    }

    pub fn pivot(&self, pivot: &str) -> Result<&PivotPair, MtError> {
        self.pivots
            .get(pivot)
            .ok_or_else(|| MtError::UnknownPivot(pivot.to_string()))
    }

    /// Backend requests across every configured client.
    pub fn calls(&self) -> u64 {
        self.pivots
            .values()
            .map(|p| p.forward.calls() + p.backward.calls())
            .sum()
    }

    pub fn roundtrip(&self, text: &str, pivot: &str) -> Result<Result<RoundtripResult, RoundtripError>, MtError> {
        let mut out = self.roundtrip_batch(&[text.to_string()], pivot)?;
        Ok(out.pop().expect("one result"))
    }

    /// Roundtrips every text; stage failures are reported per item.
    pub fn roundtrip_batch(
        &self,
        texts: &[String],
        pivot: &str,
    ) -> Result<Vec<Result<RoundtripResult, RoundtripError>>, MtError> {
        let pair = self.pivot(pivot)?;
        let forward = pair.forward.translate(texts)?;

        let ok_idx: Vec<usize> = (0..texts.len()).filter(|&i| forward[i].is_ok()).collect();
        let pivot_texts: Vec<String> = ok_idx
            .iter()
            .map(|&i| forward[i].as_ref().expect("ok").text.clone())
            .collect();
        // An empty pivot text cannot be sent back; treat it as a forward failure.
        let sendable: Vec<usize> = (0..ok_idx.len())
            .filter(|&j| !pivot_texts[j].trim().is_empty())
            .collect();
        let mut backward: Vec<Option<ItemResult>> = vec![None; ok_idx.len()];
        if !sendable.is_empty() {
            let batch: Vec<String> = sendable.iter().map(|&j| pivot_texts[j].clone()).collect();
            for (j, result) in sendable.iter().zip(pair.backward.translate(&batch)?) {
                backward[*j] = Some(result);
            }
        }

        let mut back_iter = backward.into_iter();
        let mut out = Vec::with_capacity(texts.len());
        for (i, fwd) in forward.into_iter().enumerate() {
            let original = texts[i].clone();
            let fwd = match fwd {
                Ok(f) => f,
                Err(e) => {
                    out.push(Err(RoundtripError {
                        stage: RoundtripStage::Forward,
                        original,
                        message: e.to_string(),
                    }));
                    continue;
                }
            };
            let result = match back_iter.next().expect("aligned") {
                None => Err(RoundtripError {
                    stage: RoundtripStage::Forward,
                    original,
                    message: "empty pivot translation".into(),
                }),
                Some(Err(e)) => Err(RoundtripError {
                    stage: RoundtripStage::Backward,
                    original,
                    message: e.to_string(),
                }),
                Some(Ok(b)) if b.text.trim().is_empty() => Err(RoundtripError {
                    stage: RoundtripStage::Backward,
                    original,
                    message: "empty back-translation".into(),
                }),
                Some(Ok(b)) => Ok(RoundtripResult {
                    original,
                    pivot_text: fwd.text,
                    neutral: b.text,
                    pivot_lang: pivot.to_string(),
                    forward_backend: pair.forward.spec().backend_id.clone(),
                    backward_backend: pair.backward.spec().backend_id.clone(),
                    cache_hit: (fwd.cache_hit, b.cache_hit),
                }),
            };
            out.push(result);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn spec(id: &str, kind: MtKind, src: &str, tgt: &str) -> MtBackendSpec {
        MtBackendSpec {
            backend_id: id.into(),
            kind,
            src_lang: src.into(),
            tgt_lang: tgt.into(),
            model_tag: "test".into(),
        }
    }

    fn client(id: &str, kind: MtKind, src: &str, tgt: &str) -> MtClient {
        MtClient::from_spec(spec(id, kind, src, tgt), Arc::new(TranslationCache::in_memory()), None)
            .unwrap()
    }

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn texts(results: &[ItemResult]) -> Vec<String> {
        results.iter().map(|r| r.as_ref().unwrap().text.clone()).collect()
    }

    /// Fails the first `failures` calls, then echoes.
    struct Flaky {
        failures: u32,
        seen: AtomicU32,
    }

    impl Translator for Flaky {
        fn translate_batch(&self, _: &str, _: &str, texts: &[String]) -> Result<Vec<String>, BackendError> {
            if self.seen.fetch_add(1, Ordering::SeqCst) < self.failures {
                Err(BackendError::Transport("boom".into()))
            } else {
                Ok(texts.to_vec())
            }
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
            jitter: false,
        }
    }

    #[test]
    fn identity_translate() {
        let c = client("id", MtKind::MockIdentity, "en", "zh");
        assert_eq!(texts(&c.translate(&strings(&["hello"])).unwrap()), vec!["hello"]);
    }

    #[test]
    fn scramble_is_deterministic() {
        let kind = MtKind::MockScramble(ScrambleConfig {
            seed: 7,
            ..Default::default()
        });
        let a = client("s1", kind.clone(), "en", "zh");
        let b = client("s2", kind, "en", "zh");
        let batch = strings(&["a b c"]);
        assert_eq!(texts(&a.translate(&batch).unwrap()), texts(&b.translate(&batch).unwrap()));
        assert_eq!(texts(&a.translate(&batch).unwrap()), texts(&b.translate(&batch).unwrap()));
    }

    #[test]
    fn warm_cache_issues_no_calls() {
        let c = client("id", MtKind::MockIdentity, "en", "zh");
        let batch: Vec<String> = (0..100).map(|i| format!("sentence number {i}")).collect();
        let cold = c.translate(&batch).unwrap();
        assert_eq!(c.calls(), 4);
        assert!(cold.iter().all(|r| !r.as_ref().unwrap().cache_hit));
        let warm = c.translate(&batch).unwrap();
        assert_eq!(c.calls(), 4);
        assert!(warm.iter().all(|r| r.as_ref().unwrap().cache_hit));
        assert_eq!(texts(&warm), batch);
    }

    #[test]
    fn duplicates_in_batch_are_fetched_once() {
        let c = client("id", MtKind::MockIdentity, "en", "zh").with_batch_size(1);
        let out = c.translate(&strings(&["x y", "x y", "z"])).unwrap();
        assert_eq!(texts(&out), vec!["x y", "x y", "z"]);
        assert_eq!(c.calls(), 2);
    }

    #[test]
    fn rejects_empty_input() {
        let c = client("id", MtKind::MockIdentity, "en", "zh");
        assert!(matches!(c.translate(&[]), Err(MtError::EmptyBatch)));
        assert!(matches!(c.translate(&strings(&["ok", " "])), Err(MtError::EmptyText(1))));
    }

    #[test]
    fn retry_recovers_then_gives_up() {
        let cache = Arc::new(TranslationCache::in_memory());
        let s = spec("flaky", MtKind::MockIdentity, "en", "zh");
        let flaky = Arc::new(Flaky {
            failures: 2,
            seen: AtomicU32::new(0),
        });
        let c = MtClient::new(s.clone(), flaky, cache.clone()).unwrap().with_retry(fast_retry());
        assert_eq!(texts(&c.translate(&strings(&["a"])).unwrap()), vec!["a"]);
        assert_eq!(c.calls(), 3);

        let dead = Arc::new(Flaky {
            failures: u32::MAX,
            seen: AtomicU32::new(0),
        });
        let c = MtClient::new(s, dead, cache).unwrap().with_retry(fast_retry());
        let out = c.translate(&strings(&["b", "a"])).unwrap();
        assert!(out[0].is_err());
        // "a" was cached by the first client under the same backend id.
        assert_eq!(out[1].as_ref().unwrap().text, "a");
        assert_eq!(c.calls(), 3);
    }

    #[test]
    fn partial_batch_failure_keeps_others() {
        struct FailsOn(&'static str);
        impl Translator for FailsOn {
            fn translate_batch(&self, _: &str, _: &str, t: &[String]) -> Result<Vec<String>, BackendError> {
                if t.iter().any(|x| x == self.0) {
                    Err(BackendError::Status(500))
                } else {
                    Ok(t.to_vec())
                }
            }
        }
        let c = MtClient::new(
            spec("f", MtKind::MockIdentity, "en", "zh"),
            Arc::new(FailsOn("bad")),
            Arc::new(TranslationCache::in_memory()),
        )
        .unwrap()
        .with_batch_size(1)
        .with_retry(fast_retry());
        let out = c.translate(&strings(&["good", "bad", "fine"])).unwrap();
        let ok = out.iter().filter(|r| r.is_ok()).count();
        assert_eq!(ok, 2);
        assert_eq!(out[1], Err(ItemFailure(BackendError::Status(500))));
    }

    #[test]
    fn spec_validation() {
        let mut s = spec("h", MtKind::Http { endpoint: String::new() }, "en", "zh");
        assert!(s.validate().is_err());
        s.kind = MtKind::MockIdentity;
        s.tgt_lang = "en".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn spec_toml_shape() {
        let s: MtBackendSpec = serde_json::from_value(serde_json::json!({
            "backend_id": "fw", "kind": "mock_scramble", "seed": 7,
            "src_lang": "en", "tgt_lang": "zh"
        }))
        .unwrap();
        assert_eq!(
            s.kind,
            MtKind::MockScramble(ScrambleConfig { seed: 7, ..Default::default() })
        );
        let h: MtBackendSpec = serde_json::from_value(serde_json::json!({
            "backend_id": "h", "kind": "http", "endpoint": "http://x",
            "src_lang": "en", "tgt_lang": "de"
        }))
        .unwrap();
        assert!(matches!(h.kind, MtKind::Http { .. }));
    }

    fn identity_gateway(pivot: &str) -> MtGateway {
        let mut gw = MtGateway::new();
        gw.add_pivot(
            pivot,
            client("fw", MtKind::MockIdentity, "en", pivot),
            client("bw", MtKind::MockIdentity, pivot, "en"),
        )
        .unwrap();
        gw
    }

    #[test]
    fn identity_roundtrip_and_call_budget() {
        for pivot in ["zh", "de"] {
            let gw = identity_gateway(pivot);
            let r = gw.roundtrip("Tax is due.", pivot).unwrap().unwrap();
            assert_eq!(r.neutral, "Tax is due.");
            assert_eq!(r.pivot_lang, pivot);
            assert_eq!(r.cache_hit, (false, false));
            assert_eq!(gw.calls(), 2);
            let again = gw.roundtrip("Tax is due.", pivot).unwrap().unwrap();
            assert_eq!(again.cache_hit, (true, true));
            assert_eq!(gw.calls(), 2);
        }
        assert!(matches!(
            identity_gateway("zh").roundtrip("x", "fr"),
            Err(MtError::UnknownPivot(_))
        ));
    }

    #[test]
    fn mismatched_pivot_rejected() {
        let mut gw = MtGateway::new();
        let err = gw.add_pivot(
            "zh",
            client("fw", MtKind::MockIdentity, "en", "de"),
            client("bw", MtKind::MockIdentity, "de", "en"),
        );
        assert!(err.is_err());
    }

    #[test]
    fn backward_failure_names_stage() {
        let mut gw = MtGateway::new();
        let backward = MtClient::new(
            spec("bw", MtKind::MockIdentity, "zh", "en"),
            Arc::new(Flaky {
                failures: u32::MAX,
                seen: AtomicU32::new(0),
            }),
            Arc::new(TranslationCache::in_memory()),
        )
        .unwrap()
        .with_retry(fast_retry());
        gw.add_pivot("zh", client("fw", MtKind::MockIdentity, "en", "zh"), backward)
            .unwrap();
        let err = gw.roundtrip("Hello there.", "zh").unwrap().unwrap_err();
        assert_eq!(err.stage, RoundtripStage::Backward);
        assert_eq!(err.original, "Hello there.");
    }
}
