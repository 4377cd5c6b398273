//! Terminology and name pair bank.
//!
//! Built with two model calls per pseudo-parallel pair: the first lists the
//! terms and names on the neutral side, the second finds each term's
//! counterpart on the target side. At prompt time the bank's source terms are
//! matched against the query and the hits become a one-sentence hint.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::{Regex, RegexBuilder, RegexSet, RegexSetBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::dataset::PseudoPair;
use crate::inference::{GenError, Generator};
use crate::util::{read_jsonl, write_jsonl};

pub const MAX_TERMS_PER_SENTENCE: usize = 8;
pub const MAX_MATCHES_PER_QUERY: usize = 5;
pub const DEFAULT_MIN_SUPPORT: u32 = 2;
/// Longest counterpart accepted from the alignment call, in tokens.
pub const MAX_COUNTERPART_TOKENS: usize = 4;

const EXTRACT_PREFIX: &str = "Identify terminologies or character names in the sentence and return in comma separated format, without any additional explanation. Sentence: ";
const EXTRACT_SUFFIX: &str = ". Terminologies and names:";
const ALIGN_PREFIX: &str = "Find the counterpart of the word ";
const ALIGN_MIDDLE: &str = " in the following sentence and return a single word, without any additional explanation. Sentence: ";
const ALIGN_SUFFIX: &str = ":";

const GUIDANCE_PREFIX: &str = "Note that you may want to rewrite ";
const GUIDANCE_SUFFIX: &str = " for contextual consistency.";

#[derive(Debug, Error)]
pub enum TermError {
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad term pattern {0:?}: {1}")]
    Pattern(String, String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TermPair {
    pub source_term: String,
    pub target_term: String,
    pub domain: String,
    pub support: u32,
    /// Set when another target for the same source term tied on support.
    #[serde(default)]
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermMatch {
    pub pair: TermPair,
    /// Byte offsets into the query.
    pub span: (usize, usize),
}

pub fn extract_prompt(sentence: &str) -> String {
    format!("{EXTRACT_PREFIX}{sentence}{EXTRACT_SUFFIX}")
}

pub fn align_prompt(word: &str, sentence: &str) -> String {
    format!("{ALIGN_PREFIX}{word}{ALIGN_MIDDLE}{sentence}{ALIGN_SUFFIX}")
}

pub fn parse_extract_prompt(prompt: &str) -> Option<&str> {
    prompt.strip_prefix(EXTRACT_PREFIX)?.strip_suffix(EXTRACT_SUFFIX)
}

pub fn parse_align_prompt(prompt: &str) -> Option<(&str, &str)> {
    let rest = prompt.strip_prefix(ALIGN_PREFIX)?.strip_suffix(ALIGN_SUFFIX)?;
    rest.split_once(ALIGN_MIDDLE)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Case-insensitive whole-word occurrences of `term` in `text`.
fn whole_word_spans(re: &Regex, text: &str) -> Vec<(usize, usize)> {
    re.find_iter(text)
        .filter(|m| {
            let before = text[..m.start()].chars().next_back();
            let after = text[m.end()..].chars().next();
            !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
        })
        .map(|m| (m.start(), m.end()))
        .collect()
}

fn term_regex(term: &str) -> Result<Regex, TermError> {
    RegexBuilder::new(&regex::escape(term))
        .case_insensitive(true)
        .build()
        .map_err(|e| TermError::Pattern(term.to_string(), e.to_string()))
}

fn first_whole_word(term: &str, text: &str) -> Option<(usize, usize)> {
    let re = term_regex(term).ok()?;
    whole_word_spans(&re, text).into_iter().next()
}

fn clean_term(raw: &str) -> &str {
    raw.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '\u{201c}' | '\u{201d}') || c == '.'
    })
}

/// Parses the first-round answer and keeps at most eight distinct terms that
/// occur as whole words (case-insensitively) in the neutral side.
pub fn parse_terms(response: &str, neutral: &str) -> Vec<String> {
    let line = response.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let line = line
        .strip_prefix("Terminologies and names:")
        .unwrap_or(line);
    let mut out: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for raw in line.split(',') {
        let term = clean_term(raw);
        if term.is_empty() || !seen.insert(term.to_lowercase()) {
            continue;
        }
        if first_whole_word(term, neutral).is_none() {
            debug!(term, "extracted term absent from neutral text");
            continue;
        }
        out.push(term.to_string());
        if out.len() == MAX_TERMS_PER_SENTENCE {
            break;
        }
    }
    out
}

pub fn extract_terms(pair: &PseudoPair, llm: &dyn Generator) -> Result<Vec<String>, GenError> {
    let response = llm.generate(&extract_prompt(&pair.neutral))?;
    let terms = parse_terms(&response, &pair.neutral);
    if terms.is_empty() && !response.trim().is_empty() {
        debug!(id = %pair.id, response = %response.trim(), "no usable terms in response");
    }
    Ok(terms)
}

/// Asks for the counterpart of `term` in the target side. Accepts a short
/// answer that occurs in the target and returns it with the target's casing.
pub fn align_term(term: &str, pair: &PseudoPair, llm: &dyn Generator) -> Result<Option<String>, GenError> {
    let response = llm.generate(&align_prompt(term, &pair.target))?;
    let line = response.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let answer = clean_term(line);
    let tokens = answer.split_whitespace().count();
    if tokens == 0 || tokens > MAX_COUNTERPART_TOKENS {
        return Ok(None);
    }
    Ok(first_whole_word(answer, &pair.target).map(|(s, e)| pair.target[s..e].to_string()))
}

/// Observed (source, target) mappings of one pair, deduplicated.
pub fn pair_mappings(pair: &PseudoPair, llm: &dyn Generator) -> Result<Vec<(String, String)>, GenError> {
    let mut out = Vec::new();
    for term in extract_terms(pair, llm)? {
        if let Some(target) = align_term(&term, pair, llm)? {
            if target.to_lowercase() == term.to_lowercase() {
                continue;
            }
            let mapping = (term, target);
            if !out.contains(&mapping) {
                out.push(mapping);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BankStats {
    pub pairs_seen: usize,
    pub llm_failures: usize,
    pub observations: usize,
    pub ambiguous_sources: usize,
    pub below_support: usize,
}

/// Merges per-pair observations: identical mappings accumulate support, the
/// best-supported target wins per source term (ties are all kept and marked
/// ambiguous), and mappings under `min_support` are dropped.
pub fn merge_observations<'a, I>(observations: I, domain: &str, min_support: u32) -> (Vec<TermPair>, BankStats)
where
    I: IntoIterator<Item = &'a (String, String)>,
{
    let mut counts: BTreeMap<&str, BTreeMap<&str, u32>> = BTreeMap::new();
    let mut stats = BankStats::default();
    for (source, target) in observations {
        if source == target {
            continue;
        }
        stats.observations += 1;
        *counts.entry(source).or_default().entry(target).or_default() += 1;
    }
    let mut out = Vec::new();
    for (source, targets) in counts {
        let best = *targets.values().max().expect("nonempty");
        let winners: Vec<(&str, u32)> = targets
            .iter()
            .filter(|(_, &s)| s == best)
            .map(|(&t, &s)| (t, s))
            .collect();
        if best < min_support {
            stats.below_support += targets.len();
            continue;
        }
        let ambiguous = winners.len() > 1;
        if ambiguous {
            stats.ambiguous_sources += 1;
        }
        stats.below_support += targets.values().filter(|&&s| s < min_support).count();
        for (target, support) in winners {
            out.push(TermPair {
                source_term: source.to_string(),
                target_term: target.to_string(),
                domain: domain.to_string(),
                support,
                ambiguous,
            });
        }
    }
    (out, stats)
}

pub fn build_bank(
    pairs: &[PseudoPair],
    llm: &dyn Generator,
    domain: &str,
    min_support: u32,
) -> Result<(TermBank, BankStats), TermError> {
    let per_pair: Vec<Result<Vec<(String, String)>, GenError>> =
        pairs.par_iter().map(|p| pair_mappings(p, llm)).collect();
    let mut observations = Vec::new();
    let mut failures = 0;
    for (pair, result) in pairs.iter().zip(per_pair) {
        match result {
            Ok(found) => observations.extend(found),
            Err(e) => {
                failures += 1;
                warn!(id = %pair.id, error = %e, "term extraction failed");
            }
        }
    }
    let (terms, mut stats) = merge_observations(&observations, domain, min_support);
    stats.pairs_seen = pairs.len();
    stats.llm_failures = failures;
    info!(
        domain,
        terms = terms.len(),
        observations = stats.observations,
        ambiguous = stats.ambiguous_sources,
        "term bank built"
    );
    Ok((TermBank::new(terms)?, stats))
}

/// An immutable, sorted set of term pairs with a compiled matcher.
#[derive(Debug, Clone)]
pub struct TermBank {
    pairs: Vec<TermPair>,
    /// Indices of pairs eligible for triggering (not ambiguous).
    active: Vec<usize>,
    regexes: Vec<Regex>,
    set: OnceLock<RegexSet>,
}

impl TermBank {
    pub fn new(mut pairs: Vec<TermPair>) -> Result<Self, TermError> {
        pairs.sort();
        pairs.dedup();
        let active: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].ambiguous).collect();
        let regexes = active
            .iter()
            .map(|&i| term_regex(&pairs[i].source_term))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            pairs,
            active,
            regexes,
            set: OnceLock::new(),
        })
    }

    pub fn empty() -> Self {
        Self::new(Vec::new()).expect("empty bank")
    }

    pub fn pairs(&self) -> &[TermPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), TermError> {
        write_jsonl(path, &self.pairs)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TermError> {
        Self::new(read_jsonl(path)?)
    }

    fn regex_set(&self) -> &RegexSet {
        self.set.get_or_init(|| {
            RegexSetBuilder::new(self.active.iter().map(|&i| regex::escape(&self.pairs[i].source_term)))
                .case_insensitive(true)
                .size_limit(1 << 28)
                .build()
                .expect("escaped literals compile")
        })
    }

    /// Whole-word, case-insensitive trigger scan. Overlaps are resolved
    /// longest match first, then leftmost; each mapping fires once and at
    /// most five matches are returned, sorted by start offset.
    pub fn match_triggers(&self, query: &str) -> Vec<TermMatch> {
        if self.active.is_empty() {
            return Vec::new();
        }
        let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
        for slot in self.regex_set().matches(query).iter() {
            for (s, e) in whole_word_spans(&self.regexes[slot], query) {
                candidates.push((s, e, self.active[slot]));
            }
        }
        candidates.sort_by(|a, b| {
            (b.1 - b.0)
                .cmp(&(a.1 - a.0))
                .then(a.0.cmp(&b.0))
                .then(a.2.cmp(&b.2))
        });
        let mut taken: Vec<(usize, usize, usize)> = Vec::new();
        for cand in candidates {
            if taken.len() == MAX_MATCHES_PER_QUERY {
                break;
            }
            let overlaps = taken.iter().any(|t| cand.0 < t.1 && t.0 < cand.1);
            let repeat = taken.iter().any(|t| t.2 == cand.2);
            if !overlaps && !repeat {
                taken.push(cand);
            }
        }
        taken.sort_by_key(|t| t.0);
        taken
            .into_iter()
            .map(|(s, e, i)| TermMatch {
                pair: self.pairs[i].clone(),
                span: (s, e),
            })
            .collect()
    }
}

impl PartialEq for TermBank {
    fn eq(&self, other: &Self) -> bool {
        self.pairs == other.pairs
    }
}

/// The one-sentence hint, e.g. `Note that you may want to rewrite "a" to "b"
/// for contextual consistency.` Several mappings are joined with ", " and a
/// final " and ".
pub fn render_guidance(matches: &[TermMatch]) -> Option<String> {
    if matches.is_empty() {
        return None;
    }
    let parts: Vec<String> = matches
        .iter()
        .map(|m| format!("\"{}\" to \"{}\"", m.pair.source_term, m.pair.target_term))
        .collect();
    let listed = match parts.split_last() {
        Some((last, [])) => last.clone(),
        Some((last, rest)) => format!("{} and {}", rest.join(", "), last),
        None => unreachable!(),
    };
    Some(format!("{GUIDANCE_PREFIX}{listed}{GUIDANCE_SUFFIX}"))
}

/// Recovers the (source, target) mappings from a guidance sentence.
pub fn parse_guidance(sentence: &str) -> Option<Vec<(String, String)>> {
    static PAIR: OnceLock<Regex> = OnceLock::new();
    static WHOLE: OnceLock<Regex> = OnceLock::new();
    let whole = WHOLE.get_or_init(|| {
        Regex::new(r#"^Note that you may want to rewrite ("[^"]*" to "[^"]*")((, "[^"]*" to "[^"]*")* and "[^"]*" to "[^"]*")? for contextual consistency\.$"#)
            .expect("static pattern")
    });
    if !whole.is_match(sentence) {
        return None;
    }
    let pair = PAIR.get_or_init(|| Regex::new(r#""([^"]*)" to "([^"]*)""#).expect("static pattern"));
    Some(
        pair.captures_iter(sentence)
            .map(|c| (c[1].to_string(), c[2].to_string()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn pair(id: &str, neutral: &str, target: &str) -> PseudoPair {
        PseudoPair {
            id: id.into(),
            neutral: neutral.into(),
            target: target.into(),
            pivot_lang: "zh".into(),
            domain: "irs".into(),
            flags: vec![],
        }
    }

    /// Answers from fixed tables keyed by sentence and (word, sentence).
    struct Scripted {
        extract: HashMap<String, String>,
        align: HashMap<(String, String), String>,
    }

    impl Generator for Scripted {
        fn generate(&self, prompt: &str) -> Result<String, GenError> {
            if let Some(s) = parse_extract_prompt(prompt) {
                return Ok(self.extract.get(s).cloned().unwrap_or_default());
            }
            if let Some((w, s)) = parse_align_prompt(prompt) {
                return Ok(self.align.get(&(w.to_string(), s.to_string())).cloned().unwrap_or_default());
            }
            Err(GenError::Malformed("unexpected prompt".into()))
        }
    }

    fn tp(source: &str, target: &str, support: u32) -> TermPair {
        TermPair {
            source_term: source.into(),
            target_term: target.into(),
            domain: "irs".into(),
            support,
            ambiguous: false,
        }
    }

    #[test]
    fn prompt_shapes() {
        let p = extract_prompt("The IRS sent Form 1040");
        assert_eq!(
            p,
            "Identify terminologies or character names in the sentence and return in comma separated format, without any additional explanation. Sentence: The IRS sent Form 1040. Terminologies and names:"
        );
        assert_eq!(parse_extract_prompt(&p), Some("The IRS sent Form 1040"));
        let a = align_prompt("car", "A motor vehicle.");
        assert!(a.ends_with("Sentence: A motor vehicle.:"));
        assert_eq!(parse_align_prompt(&a), Some(("car", "A motor vehicle.")));
    }

    #[test]
    fn parse_happy_path_and_hallucination() {
        let neutral = "Send the IRS your Form 1040 today";
        assert_eq!(parse_terms("IRS, Form 1040", neutral), vec!["IRS", "Form 1040"]);
        assert!(parse_terms("banana", neutral).is_empty());
        assert_eq!(parse_terms(" irs , IRS, \"Form 1040\".", neutral), vec!["irs", "Form 1040"]);
        let many = "a b c d e f g h i j";
        assert_eq!(parse_terms("a,b,c,d,e,f,g,h,i,j", many).len(), MAX_TERMS_PER_SENTENCE);
        assert!(parse_terms("", neutral).is_empty());
    }

    #[test]
    fn align_requires_presence() {
        let p = pair("1", "park the car", "park the Motor Vehicle");
        let llm = Scripted {
            extract: HashMap::new(),
            align: [
                (("car".to_string(), p.target.clone()), "motor vehicle".to_string()),
                (("park".to_string(), p.target.clone()), "garage".to_string()),
                (("the".to_string(), p.target.clone()), "one two three four five".to_string()),
            ]
            .into_iter()
            .collect(),
        };
        assert_eq!(align_term("car", &p, &llm).unwrap().as_deref(), Some("Motor Vehicle"));
        assert_eq!(align_term("park", &p, &llm).unwrap(), None);
        assert_eq!(align_term("the", &p, &llm).unwrap(), None);
    }

    #[test]
    fn merge_rules() {
        let obs: Vec<(String, String)> = [
            ("football", "soccer"),
            ("football", "soccer"),
            ("football", "soccer"),
            ("x", "x"),
            ("council", "board"),
            ("council", "panel"),
            ("council", "board"),
            ("council", "panel"),
            ("lone", "single"),
            ("tax", "levy"),
            ("tax", "levy"),
            ("tax", "duty"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let (terms, stats) = merge_observations(&obs, "irs", 2);
        assert_eq!(
            terms,
            vec![
                TermPair { ambiguous: true, ..tp("council", "board", 2) },
                TermPair { ambiguous: true, ..tp("council", "panel", 2) },
                tp("football", "soccer", 3),
                tp("tax", "levy", 2),
            ]
        );
        assert_eq!(stats.ambiguous_sources, 1);
    }

    #[test]
    fn conflict_tie_at_five() {
        let mut obs = Vec::new();
        for _ in 0..5 {
            obs.push(("council".to_string(), "board".to_string()));
            obs.push(("council".to_string(), "panel".to_string()));
        }
        let (terms, _) = merge_observations(&obs, "irs", 2);
        assert_eq!(terms.len(), 2);
        assert!(terms.iter().all(|t| t.ambiguous && t.support == 5));
    }

    #[test]
    fn scripted_transcript_over_fifty_pairs() {
        // Pair i mentions "football" when i % 2 == 0 and "council" when i % 5 == 0.
        let mut pairs = Vec::new();
        let mut llm = Scripted {
            extract: HashMap::new(),
            align: HashMap::new(),
        };
        for i in 0..50 {
            let mut neutral = vec![format!("item {i}")];
            let mut target = vec![format!("entry {i}")];
            let mut answer = Vec::new();
            if i % 2 == 0 {
                neutral.push("football".into());
                target.push("soccer".into());
                answer.push("football");
            }
            if i % 5 == 0 {
                neutral.push("council".into());
                target.push("board".into());
                answer.push("council");
            }
            answer.push("ghost");
            let p = pair(&i.to_string(), &neutral.join(" "), &target.join(" "));
            llm.extract.insert(p.neutral.clone(), answer.join(", "));
            llm.align.insert(("football".into(), p.target.clone()), "soccer".into());
            llm.align.insert(("council".into(), p.target.clone()), "board".into());
            pairs.push(p);
        }
        let (bank, stats) = build_bank(&pairs, &llm, "irs", 2).unwrap();
        assert_eq!(bank.pairs(), &[tp("council", "board", 10), tp("football", "soccer", 25)]);
        assert_eq!(stats.observations, 35);
        // Support never exceeds the number of neutral texts containing the term.
        for t in bank.pairs() {
            let n = pairs.iter().filter(|p| p.neutral.contains(&t.source_term)).count();
            assert!(n as u32 >= t.support);
        }
    }

    #[test]
    fn trigger_matching() {
        let bank = TermBank::new(vec![
            tp("art", "artwork", 3),
            tp("tax", "levy", 3),
            tp("tax return", "fiscal declaration", 2),
            tp("return", "yield", 2),
        ])
        .unwrap();
        assert!(bank.match_triggers("particle physics").is_empty());
        let m = bank.match_triggers("File your Tax Return and art.");
        let found: Vec<_> = m.iter().map(|m| (m.pair.source_term.as_str(), m.span)).collect();
        assert_eq!(found, vec![("tax return", (10, 20)), ("art", (25, 28))]);
        let m = bank.match_triggers("tax tax tax");
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].span, (0, 3));
    }

    #[test]
    fn ambiguous_pairs_do_not_trigger() {
        let bank = TermBank::new(vec![
            TermPair { ambiguous: true, ..tp("council", "board", 5) },
            TermPair { ambiguous: true, ..tp("council", "panel", 5) },
        ])
        .unwrap();
        assert!(bank.match_triggers("the council met").is_empty());
    }

    #[test]
    fn match_cap() {
        let terms: Vec<_> = (0..8).map(|i| tp(&format!("w{i}"), &format!("v{i}"), 2)).collect();
        let bank = TermBank::new(terms).unwrap();
        let m = bank.match_triggers("w0 w1 w2 w3 w4 w5 w6 w7");
        assert_eq!(m.len(), MAX_MATCHES_PER_QUERY);
        assert!(m.windows(2).all(|w| w[0].span.1 <= w[1].span.0));
    }

    #[test]
    fn guidance_sentence() {
        assert_eq!(render_guidance(&[]), None);
        let one = TermMatch { pair: tp("football", "soccer", 3), span: (0, 8) };
        let two = TermMatch { pair: tp("car", "motor vehicle", 2), span: (10, 13) };
        let three = TermMatch { pair: tp("tax", "levy", 2), span: (20, 23) };
        assert_eq!(
            render_guidance(std::slice::from_ref(&one)).unwrap(),
            "Note that you may want to rewrite \"football\" to \"soccer\" for contextual consistency."
        );
        let s = render_guidance(&[one, two, three]).unwrap();
        assert_eq!(
            s,
            "Note that you may want to rewrite \"football\" to \"soccer\", \"car\" to \"motor vehicle\" and \"tax\" to \"levy\" for contextual consistency."
        );
        assert_eq!(parse_guidance(&s).unwrap().len(), 3);
        assert!(parse_guidance("Note that word a should be rewritten to b.").is_none());
    }

    #[test]
    fn bank_persistence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");
        let bank = TermBank::new(vec![tp("tax", "levy", 2), tp("car", "motor vehicle", 4)]).unwrap();
        bank.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"source_term\":\"car\",\"target_term\":\"motor vehicle\",\"domain\":\"irs\",\"support\":4,\"ambiguous\":false}"));
        assert_eq!(TermBank::load(&path).unwrap(), bank);
    }
}
