//! Prompt templates for style transfer.
//!
//! Templates live as plain-text assets, one `kind|pattern` line each:
//! `line` is always emitted, `examples` is the example header (only when there
//! are shots), `example` repeats once per shot and `guidance` carries the
//! term hint when there is one. Rendered lines are joined with `\n`; every
//! slot value is collapsed onto a single line first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PseudoPair;
use crate::retrieval::ShotSet;
use crate::termbank::{render_guidance, TermMatch};

const TEMPLATE_I: &str = include_str!("../assets/templates/template_i.txt");
const TEMPLATE_II: &str = include_str!("../assets/templates/template_ii.txt");
const TEMPLATE_III: &str = include_str!("../assets/templates/template_iii.txt");

/// Literal that marks an unfilled query slot; refused in user input.
pub const QUERY_PLACEHOLDER: &str = "[query input]";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("style name is empty")]
    EmptyStyle,
    #[error("query contains the reserved placeholder {QUERY_PLACEHOLDER:?}")]
    Injection,
    #[error("shots include the pair being rendered ({0})")]
    SelfShot(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Template {
    I,
    II,
    III,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::I, Template::II, Template::III];

    pub fn asset(self) -> &'static str {
        match self {
            Template::I => TEMPLATE_I,
            Template::II => TEMPLATE_II,
            Template::III => TEMPLATE_III,
        }
    }

    fn lines(self) -> &'static [TemplateLine] {
        static PARSED: OnceLock<[Vec<TemplateLine>; 3]> = OnceLock::new();
        let all = PARSED.get_or_init(|| Template::ALL.map(|t| parse_asset(t.asset())));
        &all[self as usize]
    }

    /// Text the model is expected to continue from, if the template ends on one.
    pub fn cue(self) -> Option<&'static str> {
        match self {
            Template::I => Some("output:"),
            Template::II => None,
            Template::III => Some("domain:"),
        }
    }

    /// Recovers the slot values of a rendered prompt. Returns `None` unless
    /// re-rendering the recovered values gives back the same bytes.
    pub fn parse(self, prompt: &str, style: Option<&str>) -> Option<ParsedPrompt> {
        let mut known_style = style.map(str::to_string);
        let mut query = None;
        let mut n_header = None;
        let mut examples = Vec::new();
        let mut guidance = None;
        let mut lines = prompt.split('\n').peekable();
        for tl in self.lines() {
            match tl.kind {
                LineKind::Line => {
                    let caps = tl.captures(lines.next()?, known_style.as_deref())?;
                    absorb(&caps, &mut known_style, &mut query);
                }
                LineKind::Examples => {
                    if let Some(caps) = lines.peek().and_then(|l| tl.captures(l, known_style.as_deref())) {
                        absorb(&caps, &mut known_style, &mut query);
                        n_header = caps.get("n").and_then(|n| n.parse::<usize>().ok());
                        lines.next();
                    }
                }
                LineKind::Example => {
                    while let Some(caps) = lines.peek().and_then(|l| tl.captures(l, known_style.as_deref())) {
                        absorb(&caps, &mut known_style, &mut query);
                        examples.push((
                            caps.get("example_input").cloned().unwrap_or_default(),
                            caps.get("example_output").cloned().unwrap_or_default(),
                        ));
                        lines.next();
                    }
                }
                LineKind::Guidance => {
                    if let Some(caps) = lines.peek().and_then(|l| tl.captures(l, known_style.as_deref())) {
                        guidance = caps.get("guidance").cloned();
                        lines.next();
                    }
                }
            }
        }
        if lines.next().is_some() {
            return None;
        }
        if n_header.is_some_and(|n| n != examples.len()) {
            return None;
        }
        let parsed = ParsedPrompt {
            template: self,
            style: known_style?,
            query: query?,
            examples,
            guidance,
        };
        (parsed.render() == prompt).then_some(parsed)
    }
}

fn absorb(
    caps: &BTreeMap<&'static str, String>,
    style: &mut Option<String>,
    query: &mut Option<String>,
) {
    if style.is_none() {
        if let Some(s) = caps.get("style") {
            *style = Some(s.clone());
        }
    }
    if let Some(q) = caps.get("query") {
        *query = Some(q.clone());
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::I => "I",
            Template::II => "II",
            Template::III => "III",
        })
    }
}

impl FromStr for Template {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Template::I),
            "II" | "2" => Ok(Template::II),
            "III" | "3" => Ok(Template::III),
            _ => Err(PromptError::UnknownTemplate(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineKind {
    Line,
    Examples,
    Example,
    Guidance,
}

#[derive(Debug)]
struct TemplateLine {
    kind: LineKind,
    pattern: &'static str,
    matcher: OnceLock<(Regex, Vec<&'static str>)>,
}

const SLOTS: [&str; 6] = ["style", "n", "example_input", "example_output", "guidance", "query"];

fn parse_asset(asset: &'static str) -> Vec<TemplateLine> {
    asset
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (kind, pattern) = l.split_once('|').expect("template line has a kind");
            let kind = match kind {
                "line" => LineKind::Line,
                "examples" => LineKind::Examples,
                "example" => LineKind::Example,
                "guidance" => LineKind::Guidance,
                other => panic!("unknown template line kind {other:?}"),
            };
            TemplateLine {
                kind,
                pattern,
                matcher: OnceLock::new(),
            }
        })
        .collect()
}

impl TemplateLine {
    fn fill(&self, values: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.pattern.len() + 64);
        let mut rest = self.pattern;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..].find('}').map(|c| open + c).expect("closed slot");
            let name = &rest[open + 1..close];
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .unwrap_or_else(|| panic!("no value for slot {name}"));
            out.push_str(value);
            rest = &rest[close + 1..];
        }
        out.push_str(rest);
        out
    }

    fn matcher(&self) -> &(Regex, Vec<&'static str>) {
        self.matcher.get_or_init(|| {
            let mut re = String::from("^");
            let mut rest = self.pattern;
            let mut names = Vec::new();
            while let Some(open) = rest.find('{') {
                re.push_str(&regex::escape(&rest[..open]));
                let close = rest[open..].find('}').map(|c| open + c).expect("closed slot");
                let name = &rest[open + 1..close];
                let slot = SLOTS.iter().find(|s| **s == name).copied().expect("known slot");
                re.push_str(match slot {
                    "style" => "(.+?)",
                    "n" => "([0-9]+)",
                    "guidance" => "(Note that you may want to rewrite .* for contextual consistency\\.)",
                    _ => "(.*)",
                });
                names.push(slot);
                rest = &rest[close + 1..];
            }
            re.push_str(&regex::escape(rest));
            re.push('$');
            (Regex::new(&re).expect("template pattern compiles"), names)
        })
    }

    /// Slot values of `line`, or `None` when it does not fit this line or
    /// disagrees with an already known style.
    fn captures(&self, line: &str, style: Option<&str>) -> Option<BTreeMap<&'static str, String>> {
        let (re, names) = self.matcher();
        let caps = re.captures(line)?;
        let mut out = BTreeMap::new();
        for (i, name) in names.iter().enumerate() {
            let value = &caps[i + 1];
            if *name == "style" && style.is_some_and(|s| s != value) {
                return None;
            }
            out.insert(*name, value.to_string());
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPrompt {
    pub template: Template,
    pub style: String,
    pub query: String,
    pub examples: Vec<(String, String)>,
    pub guidance: Option<String>,
}

impl ParsedPrompt {
    pub fn render(&self) -> String {
        render_lines(
            self.template,
            &self.style,
            &self.query,
            &self.examples,
            self.guidance.as_deref(),
        )
    }
}

fn render_lines(
    template: Template,
    style: &str,
    query: &str,
    examples: &[(String, String)],
    guidance: Option<&str>,
) -> String {
    let n = examples.len().to_string();
    let mut out: Vec<String> = Vec::new();
    for tl in template.lines() {
        match tl.kind {
            LineKind::Line => out.push(tl.fill(&[("style", style), ("query", query), ("n", &n)])),
            LineKind::Examples if !examples.is_empty() => {
                out.push(tl.fill(&[("style", style), ("n", &n)]))
            }
            LineKind::Example => {
                for (input, output) in examples {
                    out.push(tl.fill(&[
                        ("style", style),
                        ("example_input", input),
                        ("example_output", output),
                    ]));
                }
            }
            LineKind::Guidance => {
                if let Some(g) = guidance {
                    out.push(tl.fill(&[("guidance", g)]));
                }
            }
            LineKind::Examples => {}
        }
    }
    out.join("\n")
}

/// Collapses all whitespace runs (including newlines) to single spaces.
pub fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template: Template,
    /// Maximum number of shots rendered.
    pub k: usize,
    pub include_terms: bool,
    pub style: String,
    /// Render the most similar shot first instead of closest to the query.
    #[serde(default)]
    pub most_similar_first: bool,
}

impl PromptSpec {
    pub fn new(template: Template, k: usize, style: impl Into<String>) -> Self {
        Self {
            template,
            k,
            include_terms: false,
            style: style.into(),
            most_similar_first: false,
        }
    }

    pub fn with_terms(mut self, include: bool) -> Self {
        self.include_terms = include;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub template: Template,
    pub shot_ids: Vec<String>,
    pub term_count: usize,
}

/// Renders a prompt for `query`. Shots arrive most similar first and are
/// truncated to `spec.k`; by default they are emitted in reverse so the
/// closest example sits next to the query.
pub fn render(
    spec: &PromptSpec,
    query: &str,
    shots: &ShotSet,
    terms: &[TermMatch],
) -> Result<RenderedPrompt, PromptError> {
    let query = one_line(query);
    if query.is_empty() {
        return Err(PromptError::EmptyQuery);
    }
    if query.contains(QUERY_PLACEHOLDER) {
        return Err(PromptError::Injection);
    }
    let style = one_line(&spec.style);
    if style.is_empty() {
        return Err(PromptError::EmptyStyle);
    }
    let mut chosen: Vec<_> = shots.shots.iter().take(spec.k).collect();
    if !spec.most_similar_first {
        chosen.reverse();
    }
    let examples: Vec<(String, String)> = chosen
        .iter()
        .map(|s| (one_line(&s.pair.neutral), one_line(&s.pair.target)))
        .collect();
    let (guidance, term_count) = if spec.include_terms {
        (render_guidance(terms), terms.len())
    } else {
        (None, 0)
    };
    let text = render_lines(spec.template, &style, &query, &examples, guidance.as_deref());
    Ok(RenderedPrompt {
        text,
        template: spec.template,
        shot_ids: chosen.iter().map(|s| s.pair.id.clone()).collect(),
        term_count,
    })
}

/// Prompt and completion for one finetuning example: the neutral side is the
/// query and the original sentence is the completion.
pub fn render_training_record(
    spec: &PromptSpec,
    pair: &PseudoPair,
    shots: &ShotSet,
    terms: &[TermMatch],
) -> Result<(RenderedPrompt, String), PromptError> {
    if shots.shots.iter().any(|s| s.pair.id == pair.id) {
        return Err(PromptError::SelfShot(pair.id.clone()));
    }
    let prompt = render(spec, &pair.neutral, shots, terms)?;
    Ok((prompt, pair.target.clone()))
}

/// Finds the query slot of a prompt rendered by any template.
pub fn extract_query(prompt: &str) -> Option<String> {
    Template::ALL
        .iter()
        .find_map(|t| t.parse(prompt, None))
        .map(|p| p.query)
}

/// Parses a prompt against every template.
pub fn parse_any(prompt: &str) -> Option<ParsedPrompt> {
    Template::ALL.iter().find_map(|t| t.parse(prompt, None))
}
