//! Corpus ingestion: sentence segmentation, cleaning and canonical records.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::util::{group_thousands, sha256_parts, token_count};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSONL document: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid style domain: {0}")]
    InvalidDomain(String),
    #[error("duplicate record id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDomain {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub heldout_fraction: f64,
}

impl StyleDomain {
    pub fn new(name: impl Into<String>, heldout_fraction: f64) -> Result<Self, CorpusError> {
        let domain = Self {
            name: name.into(),
            description: String::new(),
            heldout_fraction,
        };
        domain.validate()?;
        Ok(domain)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.name.trim().is_empty() {
            return Err(CorpusError::InvalidDomain("name is empty".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 0.5) {
            return Err(CorpusError::InvalidDomain(format!(
                "{}: heldout_fraction {} outside (0, 0.5)",
                self.name, self.heldout_fraction
            )));
        }
        Ok(())
    }
}

/// One in-domain sentence. `text` is trimmed, single-spaced and newline free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub domain: String,
    pub source: String,
}

/// Sentence and word totals in the shape of a dataset-size table row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: u64,
    pub words: u64,
}

impl CorpusStats {
    pub fn of(records: &[CorpusRecord]) -> Self {
        Self {
            sentences: records.len() as u64,
            words: records.iter().map(|r| token_count(&r.text) as u64).sum(),
        }
    }

    pub fn table_row(&self, dataset: &str) -> String {
        format!(
            "{dataset} | en monolingual | {} | {}",
            group_thousands(self.sentences),
            group_thousands(self.words)
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<CorpusRecord>,
    pub stats: CorpusStats,
    /// Number of invalid UTF-8 sequences replaced with U+FFFD.
    pub invalid_utf8: usize,
    pub warnings: Vec<String>,
}

const ABBREVIATIONS: &[&str] = &[
    "u.s.", "u.k.", "u.n.", "e.g.", "i.e.", "etc.", "vs.", "dr.", "mr.", "mrs.", "ms.", "prof.",
    "sr.", "jr.", "st.", "no.", "nos.", "fig.", "figs.", "vol.", "inc.", "corp.", "ltd.", "co.",
    "jan.", "feb.", "mar.", "apr.", "jun.", "jul.", "aug.", "sep.", "sept.", "oct.", "nov.",
    "dec.", "sec.", "art.", "approx.", "dept.", "gov.", "est.", "al.", "cf.", "pp.", "ch.",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

/// A sentence cut out of a document, with its byte offset and 1-based line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub line: usize,
    pub text: String,
}

/// Splits on `.`, `!` or `?` (optionally followed by closing quotes or
/// brackets) when the next thing is end of line, end of text, or whitespace
/// and an uppercase letter. Periods that end a known abbreviation do not
/// split before an uppercase word. Blank lines always separate sentences.
pub fn segment(text: &str) -> Vec<Segment> {
    let bytes = text.as_bytes();
    let mut cuts: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        let ch = text[i..].chars().next().expect("in bounds");
        let width = ch.len_utf8();
        if ch == '\n' && blank_line_follows(&text[i + 1..]) {
            cuts.push((start, i));
            start = i + 1;
            i += 1;
            continue;
        }
        if matches!(ch, '.' | '!' | '?') {
            let mut end = i + width;
            while let Some(c) = text[end..].chars().next() {
                if CLOSERS.contains(&c) || matches!(c, '.' | '!' | '?') {
                    end += c.len_utf8();
                } else {
                    break;
                }
            }
            let rest = &text[end..];
            let eol = rest.is_empty() || rest.starts_with('\n') || rest.starts_with("\r\n");
            let split = if eol {
                true
            } else if rest.starts_with(|c: char| c.is_whitespace()) {
                let after = rest.trim_start_matches([' ', '\t']);
                if after.starts_with('\n') || after.starts_with("\r\n") || after.is_empty() {
                    true
                } else {
                    let next_upper = after
                        .trim_start()
                        .chars()
                        .next()
                        .is_some_and(char::is_uppercase);
                    next_upper && !(ch == '.' && ends_with_abbreviation(&text[start..i + 1]))
                }
            } else {
                false
            };
            if split {
                cuts.push((start, end));
                start = end;
                i = end;
                continue;
            }
        }
        i += width;
    }
    if start < bytes.len() {
        cuts.push((start, bytes.len()));
    }

    let mut out = Vec::with_capacity(cuts.len());
    for (s, e) in cuts {
        let raw = &text[s..e];
        let lead = raw.len() - raw.trim_start().len();
        let normalized = raw.split_whitespace().collect::<Vec<_>>().join(" ");
        if normalized.is_empty() {
            continue;
        }
        let offset = s + lead;
        let line = 1 + text[..offset].matches('\n').count();
        out.push(Segment {
            offset,
            line,
            text: normalized,
        });
    }
    out
}

fn blank_line_follows(rest: &str) -> bool {
    let line_end = rest.find('\n');
    match line_end {
        Some(pos) => rest[..pos].trim().is_empty(),
        None => false,
    }
}

fn ends_with_abbreviation(sentence_so_far: &str) -> bool {
    let token = sentence_so_far
        .rsplit(char::is_whitespace)
        .next()
        .unwrap_or("")
        .trim_start_matches(['(', '[', '"', '\'', '\u{201c}', '\u{2018}']);
    let lower = token.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Deterministic record id from domain, provenance and byte offset.
pub fn record_id(domain: &str, source: &str, offset: usize) -> String {
    let digest = sha256_parts(&[
        domain.as_bytes(),
        source.as_bytes(),
        &(offset as u64).to_le_bytes(),
    ]);
    hex::encode(&digest[..10])
}

fn decode_lossy(bytes: &[u8]) -> (String, usize) {
    let mut out = String::with_capacity(bytes.len());
    let mut invalid = 0;
    for chunk in bytes.utf8_chunks() {
        out.push_str(chunk.valid());
        if !chunk.invalid().is_empty() {
            invalid += 1;
            out.push('\u{fffd}');
        }
    }
    (out, invalid)
}

#[derive(Deserialize)]
struct JsonlDocument {
    text: String,
}

/// Reads a plain-text document (or a JSONL file of `{"text": ...}` documents
/// when the extension is `.jsonl`) and segments it into records.
pub fn ingest(path: &Path, domain: &StyleDomain) -> Result<IngestReport, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let (text, invalid_utf8) = decode_lossy(&bytes);

    let mut report = IngestReport {
        invalid_utf8,
        ..Default::default()
    };
    if invalid_utf8 > 0 {
        let msg = format!("{file_name}: replaced {invalid_utf8} invalid UTF-8 sequence(s)");
        warn!("{msg}");
        report.warnings.push(msg);
    }

    let is_jsonl = path.extension().is_some_and(|ext| ext == "jsonl");
    if is_jsonl {
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: JsonlDocument =
                serde_json::from_str(line).map_err(|e| CorpusError::Json {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            let source = format!("{file_name}:{}", idx + 1);
            push_segments(&mut report.records, &doc.text, &domain.name, |_| {
                source.clone()
            });
        }
    } else {
        push_segments(&mut report.records, &text, &domain.name, |seg| {
            format!("{file_name}:{}", seg.line)
        });
    }

    if report.records.is_empty() {
        let msg = format!("{file_name}: no sentences found");
        warn!("{msg}");
        report.warnings.push(msg);
    }
    let mut seen = HashSet::new();
    for record in &report.records {
        if !seen.insert(record.id.as_str()) {
            return Err(CorpusError::DuplicateId(record.id.clone()));
        }
    }
    report.stats = CorpusStats::of(&report.records);
    debug!(
        file = %file_name,
        sentences = report.stats.sentences,
        words = report.stats.words,
        "ingested"
    );
    Ok(report)
}

fn push_segments(
    out: &mut Vec<CorpusRecord>,
    text: &str,
    domain: &str,
    source_of: impl Fn(&Segment) -> String,
) {
    for seg in segment(text) {
        let source = source_of(&seg);
        out.push(CorpusRecord {
            id: record_id(domain, &source, seg.offset),
            text: seg.text,
            domain: domain.to_string(),
            source,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanPolicy {
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Minimum share of alphabetic characters among non-whitespace ones.
    pub min_alpha_ratio: f64,
    pub dedup: bool,
}

impl Default for CleanPolicy {
    fn default() -> Self {
        Self {
            min_tokens: 3,
            max_tokens: 150,
            min_alpha_ratio: 0.6,
            dedup: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TooShort,
    TooLong,
    NonText,
    Duplicate,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::TooShort => "too_short",
            DropReason::TooLong => "too_long",
            DropReason::NonText => "non_text",
            DropReason::Duplicate => "duplicate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, Default)]
pub struct CleanOutcome {
    pub kept: Vec<CorpusRecord>,
    pub dropped: Vec<Dropped>,
}

fn alpha_ratio(text: &str) -> f64 {
    let mut visible = 0usize;
    let mut alpha = 0usize;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        visible += 1;
        if c.is_alphabetic() {
            alpha += 1;
        }
    }
    if visible == 0 {
        0.0
    } else {
        alpha as f64 / visible as f64
    }
}

pub fn clean(records: &[CorpusRecord], policy: &CleanPolicy) -> CleanOutcome {
    let mut outcome = CleanOutcome::default();
    let mut seen: HashSet<&str> = HashSet::new();
    for record in records {
        let tokens = token_count(&record.text);
        let reason = if tokens < policy.min_tokens {
            Some(DropReason::TooShort)
        } else if tokens > policy.max_tokens {
            Some(DropReason::TooLong)
        } else if alpha_ratio(&record.text) < policy.min_alpha_ratio {
            Some(DropReason::NonText)
        } else if policy.dedup && !seen.insert(record.text.as_str()) {
            Some(DropReason::Duplicate)
        } else {
            None
        };
        match reason {
            Some(reason) => {
                debug!(id = %record.id, %reason, "dropped");
                outcome.dropped.push(Dropped {
                    id: record.id.clone(),
                    reason,
                });
            }
            None => outcome.kept.push(record.clone()),
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texts(segs: &[Segment]) -> Vec<&str> {
        segs.iter().map(|s| s.text.as_str()).collect()
    }

    fn rec(id: &str, text: &str) -> CorpusRecord {
        CorpusRecord {
            id: id.into(),
            text: text.into(),
            domain: "d".into(),
            source: "t".into(),
        }
    }

    #[test]
    fn two_sentences() {
        assert_eq!(texts(&segment("A. B.")), vec!["A.", "B."]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        let segs = segment("The U.S. Treasury issued it. Dr. Smith agreed, e.g. Monday came.");
        assert_eq!(
            texts(&segs),
            vec!["The U.S. Treasury issued it.", "Dr. Smith agreed, e.g. Monday came."]
        );
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(texts(&segment("It is 3.5 percent. see below")).len(), 1);
        assert_eq!(texts(&segment("Wait... what? No!")), vec!["Wait... what?", "No!"]);
    }

    #[test]
    fn eol_and_blank_lines() {
        let segs = segment("First line ends here.\nsecond starts lower.\n\nHeading without stop\nNext.");
        assert_eq!(
            texts(&segs),
            vec![
                "First line ends here.",
                "second starts lower.",
                "Heading without stop Next."
            ]
        );
        assert_eq!(segs[1].line, 2);
        assert_eq!(segs[2].line, 4);
    }

    #[test]
    fn closing_quotes_stay_with_sentence() {
        assert_eq!(
            texts(&segment("He said \"Go.\" Then he left.")),
            vec!["He said \"Go.\"", "Then he left."]
        );
    }

    #[test]
    fn ingest_counts_and_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("irs.txt");
        std::fs::write(&path, "You must file your tax return on time.\n").unwrap();
        let domain = StyleDomain::new("irs", 0.1).unwrap();
        let report = ingest(&path, &domain).unwrap();
        assert_eq!(report.records.len(), 1);
        assert_eq!(report.stats.words, 8);
        let again = ingest(&path, &domain).unwrap();
        assert_eq!(report.records, again.records);

        std::fs::write(&path, "One two three four five six seven.").unwrap();
        assert_eq!(ingest(&path, &domain).unwrap().stats.words, 7);
    }

    #[test]
    fn ingest_jsonl_and_invalid_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        std::fs::write(&path, "{\"text\": \"A. B.\"}\n{\"text\": \"C c c.\"}\n").unwrap();
        let domain = StyleDomain::new("lit", 0.2).unwrap();
        let report = ingest(&path, &domain).unwrap();
        assert_eq!(report.records.len(), 3);
        assert_eq!(report.records[2].source, "docs.jsonl:2");

        let raw = dir.path().join("raw.txt");
        std::fs::write(&raw, b"Caf\xff is open. Bad \xfe\xfe byte.").unwrap();
        let report = ingest(&raw, &domain).unwrap();
        assert_eq!(report.invalid_utf8, 3);
        assert!(report.records[0].text.contains('\u{fffd}'));
    }

    #[test]
    fn ingest_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        let domain = StyleDomain::new("x", 0.1).unwrap();
        let report = ingest(&path, &domain).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(matches!(
            ingest(&dir.path().join("missing.txt"), &domain),
            Err(CorpusError::Read { .. })
        ));
    }

    #[test]
    fn domain_validation() {
        assert!(StyleDomain::new("", 0.1).is_err());
        assert!(StyleDomain::new("a", 0.5).is_err());
        assert!(StyleDomain::new("a", 0.0).is_err());
        assert!(StyleDomain::new("a", 0.49).is_ok());
    }

    #[test]
    fn table_row_format() {
        let stats = CorpusStats {
            sentences: 455_733,
            words: 7_349_231,
        };
        assert_eq!(stats.table_row("IRS"), "IRS | en monolingual | 455,733 | 7,349,231");
    }

    #[test]
    fn clean_reasons() {
        let policy = CleanPolicy::default();
        let records = vec![
            rec("1", "one two three"),
            rec("2", "one two three"),
            rec("3", "single"),
            rec("4", "12 345 6789 !!"),
            rec("5", &vec!["w"; 151].join(" ")),
        ];
        let out = clean(&records, &policy);
        assert_eq!(out.kept.len(), 1);
        let reasons: Vec<_> = out.dropped.iter().map(|d| (d.id.as_str(), d.reason)).collect();
        assert_eq!(
            reasons,
            vec![
                ("2", DropReason::Duplicate),
                ("3", DropReason::TooShort),
                ("4", DropReason::NonText),
                ("5", DropReason::TooLong)
            ]
        );
    }

    #[test]
    fn dedup_matches_set_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let alphabet: Vec<char> = ('a'..='z').collect();
        let mut unique: Vec<String> = Vec::new();
        while unique.len() < 900 {
            let words: Vec<String> = (0..4)
                .map(|_| (0..6).map(|_| alphabet[rng.random_range(0..26)]).collect())
                .collect();
            let line = words.join(" ");
            if !unique.contains(&line) {
                unique.push(line);
            }
        }
        let mut lines = unique.clone();
        for i in 0..100 {
            lines.push(unique[(i * 7) % 900].clone());
        }
        let records: Vec<_> = lines
            .iter()
            .enumerate()
            .map(|(i, t)| rec(&i.to_string(), t))
            .collect();
        let expected = lines.iter().collect::<HashSet<_>>().len();
        assert_eq!(expected, 900);
        assert_eq!(clean(&records, &CleanPolicy::default()).kept.len(), expected);
    }

    proptest! {
        #[test]
        fn segmentation_is_deterministic_and_clean(text in "[A-Za-z .!?\n\t]{0,200}") {
            let a = segment(&text);
            prop_assert_eq!(&a, &segment(&text));
            for seg in &a {
                prop_assert!(!seg.text.contains('\n'));
                prop_assert_eq!(seg.text.trim(), seg.text.as_str());
                prop_assert!(!seg.text.is_empty());
            }
        }

        #[test]
        fn clean_is_idempotent(lines in proptest::collection::vec("[a-z0-9 ]{0,30}", 0..40)) {
            let records: Vec<_> = lines.iter().enumerate().map(|(i, t)| rec(&i.to_string(), t.trim())).collect();
            let once = clean(&records, &CleanPolicy::default()).kept;
            let twice = clean(&once, &CleanPolicy::default()).kept;
            prop_assert_eq!(once, twice);
        }
    }
}
