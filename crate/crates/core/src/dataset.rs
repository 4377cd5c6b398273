//! Pseudo-parallel pairs from roundtripped corpus records, and data splits.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::corpus::{CorpusRecord, StyleDomain};
use crate::mt::{MtError, MtGateway, RoundtripError, RoundtripResult};
use crate::util::{token_count, unit_interval};

/// Failure rate above which a build is reported as degraded.
pub const DEGRADED_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairFlag {
    /// The roundtrip returned the sentence unchanged.
    TrivialPair,
}

/// Neutral (roundtripped) source side paired with the original sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub id: String,
    pub neutral: String,
    pub target: String,
    pub pivot_lang: String,
    pub domain: String,
    #[serde(default)]
    pub flags: Vec<PairFlag>,
}

impl PseudoPair {
    pub fn is_trivial(&self) -> bool {
        self.flags.contains(&PairFlag::TrivialPair)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairFilterPolicy {
    /// Inclusive bounds on neutral/target token-count ratio.
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub min_neutral_tokens: usize,
}

impl Default for PairFilterPolicy {
    fn default() -> Self {
        Self {
            min_ratio: 0.5,
            max_ratio: 2.0,
            min_neutral_tokens: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairDropReason {
    RoundtripFailed,
    NeutralTooShort,
    LengthRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDrop {
    pub id: String,
    pub reason: PairDropReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BuildOutcome {
    /// Sorted by id.
    pub pairs: Vec<PseudoPair>,
    pub dropped: Vec<PairDrop>,
    pub total: usize,
    pub rt_failures: usize,
}

impl BuildOutcome {
    pub fn failure_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.rt_failures as f64 / self.total as f64
        }
    }

    pub fn degraded(&self) -> bool {
        self.failure_rate() > DEGRADED_FAILURE_RATE
    }

    pub fn trivial_pairs(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_trivial()).count()
    }
}

fn ratio_drop(pair: &PseudoPair, policy: &PairFilterPolicy) -> Option<PairDrop> {
    let neutral = token_count(&pair.neutral);
    let target = token_count(&pair.target);
    if neutral < policy.min_neutral_tokens {
        return Some(PairDrop {
            id: pair.id.clone(),
            reason: PairDropReason::NeutralTooShort,
            detail: format!("{neutral} neutral tokens"),
        });
    }
    let ratio = neutral as f64 / target.max(1) as f64;
    if ratio < policy.min_ratio || ratio > policy.max_ratio {
        return Some(PairDrop {
            id: pair.id.clone(),
            reason: PairDropReason::LengthRatio,
            detail: format!("ratio {ratio:.3} ({neutral}/{target})"),
        });
    }
    None
}

/// Drops pairs whose neutral/target token ratio falls outside the bounds or
/// whose neutral side is too short.
pub fn filter_pairs(pairs: Vec<PseudoPair>, policy: &PairFilterPolicy) -> (Vec<PseudoPair>, Vec<PairDrop>) {
    let mut kept = Vec::with_capacity(pairs.len());
    let mut dropped = Vec::new();
    for pair in pairs {
        match ratio_drop(&pair, policy) {
            Some(drop) => {
                debug!(id = %drop.id, reason = ?drop.reason, "pair dropped");
                dropped.push(drop);
            }
            None => kept.push(pair),
        }
    }
    (kept, dropped)
}

/// Pairs records with roundtrip outcomes aligned by position.
pub fn assemble_pairs(
    records: &[CorpusRecord],
    roundtrips: &[Result<RoundtripResult, RoundtripError>],
    policy: &PairFilterPolicy,
) -> BuildOutcome {
    assert_eq!(records.len(), roundtrips.len(), "records and roundtrips must align");
    let mut outcome = BuildOutcome {
        total: records.len(),
        ..Default::default()
    };
    let mut candidates = Vec::with_capacity(records.len());
    for (record, rt) in records.iter().zip(roundtrips) {
        match rt {
            Ok(rt) => {
                let mut flags = Vec::new();
                if rt.neutral == record.text {
                    flags.push(PairFlag::TrivialPair);
                }
                candidates.push(PseudoPair {
                    id: record.id.clone(),
                    neutral: rt.neutral.clone(),
                    target: record.text.clone(),
                    pivot_lang: rt.pivot_lang.clone(),
                    domain: record.domain.clone(),
                    flags,
                });
            }
            Err(e) => {
                outcome.rt_failures += 1;
                outcome.dropped.push(PairDrop {
                    id: record.id.clone(),
                    reason: PairDropReason::RoundtripFailed,
                    detail: e.to_string(),
                });
            }
        }
    }
    let (mut kept, dropped) = filter_pairs(candidates, policy);
    kept.sort_by(|a, b| a.id.cmp(&b.id));
    outcome.pairs = kept;
    outcome.dropped.extend(dropped);
    info!(
        total = outcome.total,
        pairs = outcome.pairs.len(),
        rt_failures = outcome.rt_failures,
        trivial = outcome.trivial_pairs(),
        "pairs assembled"
    );
    outcome
}

/// Roundtrips every record through `pivot` and assembles filtered pairs.
pub fn build_pairs(
    records: &[CorpusRecord],
    gateway: &MtGateway,
    pivot: &str,
    policy: &PairFilterPolicy,
) -> Result<BuildOutcome, MtError> {
    if records.is_empty() {
        return Ok(BuildOutcome::default());
    }
    let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
    let roundtrips = gateway.roundtrip_batch(&texts, pivot)?;
    Ok(assemble_pairs(records, &roundtrips, policy))
}

/// Which part of the corpus each record id belongs to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub heldout_classifier: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    HeldoutClassifier,
    Test,
}

/// Stateless assignment: a hash draw below `f` goes to the classifier
/// held-out set, below `2f` to test, everything else trains when it has a
/// pair. Records without a surviving pair fall back to the classifier set.
pub fn assign(id: &str, heldout_fraction: f64, has_pair: bool) -> Partition {
    let u = unit_interval(&format!("split:{id}"));
    if u < heldout_fraction {
        Partition::HeldoutClassifier
    } else if u < 2.0 * heldout_fraction {
        Partition::Test
    } else if has_pair {
        Partition::Train
    } else {
        Partition::HeldoutClassifier
    }
}

pub fn split(pairs: &[PseudoPair], records: &[CorpusRecord], domain: &StyleDomain) -> DatasetSplit {
    let paired: HashSet<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    let mut train = BTreeSet::new();
    let mut heldout = BTreeSet::new();
    let mut test = BTreeSet::new();
    for record in records.iter().filter(|r| r.domain == domain.name) {
        let id = record.id.clone();
        match assign(&record.id, domain.heldout_fraction, paired.contains(record.id.as_str())) {
            Partition::Train => train.insert(id),
            Partition::HeldoutClassifier => heldout.insert(id),
            Partition::Test => test.insert(id),
        };
    }
    DatasetSplit {
        train: train.into_iter().collect(),
        heldout_classifier: heldout.into_iter().collect(),
        test: test.into_iter().collect(),
    }
}

impl DatasetSplit {
    /// Pairs whose ids are in the train partition, in input order.
    pub fn train_pairs<'a>(&self, pairs: &'a [PseudoPair]) -> Vec<&'a PseudoPair> {
        let train: HashSet<&str> = self.train.iter().map(String::as_str).collect();
        pairs.iter().filter(|p| train.contains(p.id.as_str())).collect()
    }

    pub fn select<'a>(ids: &[String], records: &'a [CorpusRecord]) -> Vec<&'a CorpusRecord> {
        let by_id: HashMap<&str, &CorpusRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
        ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mt::{
        BackendError, MtBackendSpec, MtClient, MtKind, RetryPolicy, RoundtripStage,
        TranslationCache, Translator,
    };
    use proptest::prelude::*;
    use std::sync::Arc;
    use std::time::Duration;

    fn record(id: &str, text: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            text: text.into(),
            domain: "irs".into(),
            source: "t:1".into(),
        }
    }

    fn pair(id: &str, neutral_tokens: usize, target_tokens: usize) -> PseudoPair {
        PseudoPair {
            id: id.into(),
            neutral: vec!["n"; neutral_tokens].join(" "),
            target: vec!["t"; target_tokens].join(" "),
            pivot_lang: "zh".into(),
            domain: "irs".into(),
            flags: vec![],
        }
    }

    fn spec(id: &str, src: &str, tgt: &str) -> MtBackendSpec {
        MtBackendSpec {
            backend_id: id.into(),
            kind: MtKind::MockIdentity,
            src_lang: src.into(),
            tgt_lang: tgt.into(),
            model_tag: String::new(),
        }
    }

    /// Echo backend that fails on any text listed in `poison`.
    struct Poisoned(HashSet<String>);

    impl Translator for Poisoned {
        fn translate_batch(&self, _: &str, _: &str, texts: &[String]) -> Result<Vec<String>, BackendError> {
            if texts.iter().any(|t| self.0.contains(t)) {
                Err(BackendError::Transport("injected".into()))
            } else {
                Ok(texts.to_vec())
            }
        }
    }

    fn gateway(poison: HashSet<String>) -> MtGateway {
        let cache = Arc::new(TranslationCache::in_memory());
        let fast = RetryPolicy {
            attempts: 2,
            base_delay: Duration::from_millis(1),
            jitter: false,
        };
        let forward = MtClient::new(spec("fw", "en", "zh"), Arc::new(Poisoned(poison)), cache.clone())
            .unwrap()
            .with_batch_size(1)
            .with_retry(fast);
        let backward = MtClient::from_spec(spec("bw", "zh", "en"), cache, None).unwrap();
        let mut gw = MtGateway::new();
        gw.add_pivot("zh", forward, backward).unwrap();
        gw
    }

    #[test]
    fn identity_pair() {
        let out = build_pairs(&[record("r1", "X is a b c")], &gateway(HashSet::new()), "zh", &Default::default())
            .unwrap();
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].neutral, "X is a b c");
        assert_eq!(out.pairs[0].target, "X is a b c");
        assert!(out.pairs[0].is_trivial());
    }

    #[test]
    fn fault_injection_counts() {
        let records: Vec<_> = (0..1000)
            .map(|i| record(&format!("r{i:04}"), &format!("sentence {i} has words")))
            .collect();
        let poison: HashSet<String> = records.iter().step_by(20).map(|r| r.text.clone()).collect();
        assert_eq!(poison.len(), 50);
        let out = build_pairs(&records, &gateway(poison), "zh", &Default::default()).unwrap();
        assert_eq!(out.pairs.len(), 950);
        assert_eq!(out.rt_failures, 50);
        assert!(!out.degraded());
        assert!(out
            .dropped
            .iter()
            .all(|d| d.reason == PairDropReason::RoundtripFailed && d.detail.contains("Forward")));
        let _ = RoundtripStage::Forward;
    }

    #[test]
    fn heavy_failure_is_degraded() {
        let records: Vec<_> = (0..10).map(|i| record(&i.to_string(), &format!("text {i} here"))).collect();
        let poison = records.iter().take(3).map(|r| r.text.clone()).collect();
        let out = build_pairs(&records, &gateway(poison), "zh", &Default::default()).unwrap();
        assert!((out.failure_rate() - 0.3).abs() < 1e-12);
        assert!(out.degraded());
    }

    #[test]
    fn ratio_boundaries() {
        let policy = PairFilterPolicy::default();
        let (kept, dropped) = filter_pairs(vec![pair("a", 4, 10), pair("b", 5, 10), pair("c", 20, 10), pair("d", 21, 10), pair("e", 1, 1)], &policy);
        let kept: Vec<_> = kept.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(kept, vec!["b", "c"]);
        let reasons: Vec<_> = dropped.iter().map(|d| (d.id.as_str(), d.reason)).collect();
        assert_eq!(
            reasons,
            vec![
                ("a", PairDropReason::LengthRatio),
                ("d", PairDropReason::LengthRatio),
                ("e", PairDropReason::NeutralTooShort)
            ]
        );
    }

    #[test]
    fn planted_outliers_are_exactly_dropped() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut planted = HashSet::new();
        let mut pairs = Vec::new();
        for i in 0..1000 {
            let target: usize = rng.random_range(4..30);
            let id = format!("p{i}");
            let neutral = if i % 33 == 0 {
                planted.insert(id.clone());
                if rng.random_bool(0.5) { target * 2 + rng.random_range(1..5) } else { (target - 1) / 2 }
            } else {
                // Inside [0.5, 2.0] and at least two tokens.
                let lo = target.div_ceil(2).max(2);
                rng.random_range(lo..=target * 2)
            };
            pairs.push(pair(&id, neutral.max(2), target));
        }
        // The shrink branch can only violate the lower bound when target >= 5.
        planted.retain(|id| {
            let p = pairs.iter().find(|p| &p.id == id).unwrap();
            let ratio = token_count(&p.neutral) as f64 / token_count(&p.target) as f64;
            !(0.5..=2.0).contains(&ratio)
        });
        assert!(planted.len() >= 25);
        let (_, dropped) = filter_pairs(pairs, &PairFilterPolicy::default());
        let dropped: HashSet<String> = dropped.into_iter().map(|d| d.id).collect();
        assert_eq!(dropped, planted);
    }

    fn arb_corpus() -> impl Strategy<Value = (Vec<CorpusRecord>, Vec<bool>, f64)> {
        (1usize..200, 0.01f64..0.49).prop_flat_map(|(n, f)| {
            (proptest::collection::vec(any::<bool>(), n), Just(f)).prop_map(move |(has_pair, f)| {
                let records = (0..has_pair.len())
                    .map(|i| record(&format!("id{i}"), "some text here"))
                    .collect();
                (records, has_pair, f)
            })
        })
    }

    proptest! {
        #[test]
        fn split_partitions_records((records, has_pair, f) in arb_corpus()) {
            let pairs: Vec<PseudoPair> = records
                .iter()
                .zip(&has_pair)
                .filter(|(_, &h)| h)
                .map(|(r, _)| pair(&r.id, 3, 3))
                .collect();
            let domain = StyleDomain::new("irs", f).unwrap();
            let s = split(&pairs, &records, &domain);
            prop_assert_eq!(&s, &split(&pairs, &records, &domain));
            let mut all: Vec<&String> = s.train.iter().chain(&s.heldout_classifier).chain(&s.test).collect();
            prop_assert_eq!(all.len(), records.len());
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), records.len());
            let paired: HashSet<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
            for id in &s.train {
                prop_assert!(paired.contains(id.as_str()));
            }
        }

        #[test]
        fn target_side_is_verbatim(texts in proptest::collection::vec("[A-Za-z]{1,8}( [a-z]{1,8}){2,6}", 1..30)) {
            let records: Vec<_> = texts.iter().enumerate().map(|(i, t)| record(&format!("{i:03}"), t)).collect();
            let out = build_pairs(&records, &gateway(HashSet::new()), "zh", &Default::default()).unwrap();
            let by_id: HashMap<_, _> = records.iter().map(|r| (r.id.clone(), r.text.clone())).collect();
            for p in &out.pairs {
                prop_assert_eq!(&p.target, &by_id[&p.id]);
            }
        }
    }
}
