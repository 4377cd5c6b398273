//! Corpus and sentence BLEU.
//!
//! Tokenization follows the 13a scheme: pad punctuation and symbols with
//! spaces, split periods and commas off unless they sit next to a digit on
//! the relevant side, split a dash that follows a digit, then split on
//! whitespace. Statistics are integer counts summed in segment order.

use std::collections::HashMap;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    /// Add one to matches and totals of every order above unigrams.
    AddOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub max_order: usize,
    pub case_sensitive: bool,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::corpus()
    }
}

impl BleuConfig {
    pub fn corpus() -> Self {
        Self {
            max_order: 4,
            case_sensitive: true,
            smoothing: Smoothing::None,
        }
    }

    pub fn sentence() -> Self {
        Self {
            smoothing: Smoothing::AddOne,
            ..Self::corpus()
        }
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "bleu:nrefs=1|case={}|tok=13a|smooth={}|order={}",
            if self.case_sensitive { "mixed" } else { "lc" },
            match self.smoothing {
                Smoothing::None => "none",
                Smoothing::AddOne => "add1",
            },
            self.max_order
        )
    }
}

struct Tok13a {
    punct: Regex,
    period_after: Regex,
    period_before: Regex,
    dash: Regex,
}

fn tok13a() -> &'static Tok13a {
    static TOK: OnceLock<Tok13a> = OnceLock::new();
    TOK.get_or_init(|| Tok13a {
        punct: Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").expect("static pattern"),
        period_after: Regex::new(r"([^0-9])([\.,])").expect("static pattern"),
        period_before: Regex::new(r"([\.,])([^0-9])").expect("static pattern"),
        dash: Regex::new(r"([0-9])(-)").expect("static pattern"),
    })
}

pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut line = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if line.contains('&') {
        line = line
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let t = tok13a();
    let line = format!(" {line} ");
    let line = t.punct.replace_all(&line, " $1 ");
    let line = t.period_after.replace_all(&line, "$1 $2 ");
    let line = t.period_before.replace_all(&line, " $1 $2");
    let line = t.dash.replace_all(&line, "$1 $2 ");
    line.split_whitespace().map(str::to_string).collect()
}

/// Clipped n-gram matches and hypothesis n-gram totals per order, plus lengths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    fn zero(order: usize) -> Self {
        Self {
            matches: vec![0; order],
            totals: vec![0; order],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Brevity penalty times the geometric mean of the n-gram precisions, in 0–100.
    pub fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let order = self.matches.len();
        let mut log_sum = 0.0;
        for n in 0..order {
            let (m, t) = match smoothing {
                Smoothing::AddOne if n > 0 => (self.matches[n] + 1, self.totals[n] + 1),
                _ => (self.matches[n], self.totals[n]),
            };
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        (100.0 * bp * (log_sum / order as f64).exp()).clamp(0.0, 100.0)
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn segment_stats(hyp: &str, reference: &str, cfg: &BleuConfig) -> BleuStats {
    let prep = |s: &str| {
        if cfg.case_sensitive {
            tokenize_13a(s)
        } else {
            tokenize_13a(&s.to_lowercase())
        }
    };
    let (h, r) = (prep(hyp), prep(reference));
    let mut stats = BleuStats::zero(cfg.max_order);
    stats.hyp_len = h.len() as u64;
    stats.ref_len = r.len() as u64;
    for n in 1..=cfg.max_order {
        let hc = ngram_counts(&h, n);
        let rc = ngram_counts(&r, n);
        stats.totals[n - 1] = h.len().saturating_sub(n - 1) as u64;
        stats.matches[n - 1] = hc
            .iter()
            .map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0)))
            .sum();
    }
    stats
}

fn check(hyps: usize, refs: usize, cfg: &BleuConfig) -> Result<(), EvalError> {
    if cfg.max_order == 0 {
        return Err(EvalError::InvalidConfig("max_order must be at least 1".into()));
    }
    if hyps != refs {
        return Err(EvalError::LengthMismatch(hyps, refs));
    }
    if hyps == 0 {
        return Err(EvalError::EmptyInput);
    }
    Ok(())
}

pub fn corpus_stats(hyps: &[String], refs: &[String], cfg: &BleuConfig) -> Result<BleuStats, EvalError> {
    check(hyps.len(), refs.len(), cfg)?;
    let per: Vec<BleuStats> = hyps
        .par_iter()
        .zip(refs.par_iter())
        .map(|(h, r)| segment_stats(h, r, cfg))
        .collect();
    let mut total = BleuStats::zero(cfg.max_order);
    for s in &per {
        total.add(s);
    }
    Ok(total)
}

pub fn corpus_bleu(hyps: &[String], refs: &[String], cfg: &BleuConfig) -> Result<f64, EvalError> {
    Ok(corpus_stats(hyps, refs, cfg)?.score(cfg.smoothing))
}

pub fn sentence_bleu(hyp: &str, reference: &str, cfg: &BleuConfig) -> f64 {
    segment_stats(hyp, reference, cfg).score(cfg.smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenization() {
        assert_eq!(tokenize_13a("Hello, world!"), v(&["Hello", ",", "world", "!"]));
        assert_eq!(tokenize_13a("It costs $1,000.50."), v(&["It", "costs", "$", "1,000.50", "."]));
        assert_eq!(tokenize_13a("1990-2000 well-known"), v(&["1990", "-", "2000", "well-known"]));
        assert_eq!(tokenize_13a("a &amp; b (c)"), v(&["a", "&", "b", "(", "c", ")"]));
        assert_eq!(tokenize_13a("don't"), v(&["don't"]));
    }

    #[test]
    fn cat_on_the_mat_by_hand() {
        // hyp: the cat sat on the mat / ref: the cat is on the mat
        // p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = 0/3 -> corpus BLEU 0.
        let s = segment_stats("the cat sat on the mat", "the cat is on the mat", &BleuConfig::corpus());
        assert_eq!(s.matches, vec![5, 3, 1, 0]);
        assert_eq!(s.totals, vec![6, 5, 4, 3]);
        assert_eq!(s.score(Smoothing::None), 0.0);
        // Add-one on orders 2..4: (5/6 * 4/6 * 2/5 * 1/4)^(1/4).
        let expect = 100.0 * (5.0 / 6.0 * 4.0 / 6.0 * 2.0 / 5.0 * 1.0 / 4.0f64).powf(0.25);
        assert!((s.score(Smoothing::AddOne) - expect).abs() < 1e-9);
    }

    #[test]
    fn identity_and_disjoint() {
        let x = v(&["the quick brown fox jumps", "over the lazy dog today ."]);
        assert_eq!(corpus_bleu(&x, &x, &BleuConfig::corpus()).unwrap(), 100.0);
        let y = v(&["alpha beta gamma delta", "epsilon zeta eta theta iota"]);
        assert_eq!(corpus_bleu(&y, &x, &BleuConfig::corpus()).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let cfg = BleuConfig::corpus();
        assert!(matches!(corpus_bleu(&[], &[], &cfg), Err(EvalError::EmptyInput)));
        assert!(matches!(corpus_bleu(&v(&["a"]), &[], &cfg), Err(EvalError::LengthMismatch(1, 0))));
    }

    #[test]
    fn brevity_penalty() {
        let hyp = v(&["a b c d e"]);
        let refs = v(&["a b c d e f g h i j"]);
        let got = corpus_bleu(&hyp, &refs, &BleuConfig::corpus()).unwrap();
        assert!((got - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn case_folding() {
        let cfg = BleuConfig {
            case_sensitive: false,
            ..BleuConfig::corpus()
        };
        assert_eq!(corpus_bleu(&v(&["THE CAT SAT DOWN"]), &v(&["the cat sat down"]), &cfg).unwrap(), 100.0);
        assert_eq!(cfg.fingerprint(), "bleu:nrefs=1|case=lc|tok=13a|smooth=none|order=4");
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "the", "cat", ","]), 4..12)
            .prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn identity_is_100(xs in prop::collection::vec(sentence(), 1..6)) {
            prop_assert_eq!(corpus_bleu(&xs, &xs, &BleuConfig::corpus()).unwrap(), 100.0);
        }

        #[test]
        fn permutation_invariant(pairs in prop::collection::vec((sentence(), sentence()), 1..8), rot in 0usize..8) {
            let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
            let k = rot % pairs.len();
            let mut h2 = h.clone();
            let mut r2 = r.clone();
            h2.rotate_left(k);
            r2.rotate_left(k);
            let cfg = BleuConfig::corpus();
            prop_assert_eq!(corpus_bleu(&h, &r, &cfg).unwrap(), corpus_bleu(&h2, &r2, &cfg).unwrap());
        }

        #[test]
        fn appending_unmatched_token_never_helps(pairs in prop::collection::vec((sentence(), sentence()), 1..6)) {
            let cfg = BleuConfig::corpus();
            // References no longer than their hypotheses, so the brevity penalty stays 1.
            let (h, r): (Vec<String>, Vec<String>) = pairs
                .into_iter()
                .map(|(a, b)| {
                    let n = tokenize_13a(&a).len();
                    let b = tokenize_13a(&b).into_iter().take(n).collect::<Vec<_>>().join(" ");
                    (a, b)
                })
                .unzip();
            let h_plus: Vec<String> = h.iter().map(|s| format!("{s} zzz")).collect();
            prop_assert!(corpus_bleu(&h_plus, &r, &cfg).unwrap() <= corpus_bleu(&h, &r, &cfg).unwrap() + 1e-9);
        }
    }
}
