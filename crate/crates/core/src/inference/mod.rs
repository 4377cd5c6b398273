//! Style transfer of test queries.
//!
//! A query is first neutralized by roundtrip translation (unless the route is
//! direct), then rendered into a prompt with optional examples and term hints
//! and sent to the generator. Similar-example mode is two rounds: a sketch is
//! generated with random examples, and the sketch picks the real examples.

mod backend;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use backend::{
    CountingGenerator, EchoGenerator, GenBackendSpec, GenError, GenKind, Generator, HttpGenerator, Rulebook,
    RulebookGenerator,
};

use crate::mt::{MtError, MtGateway, RoundtripError, RoundtripResult};
use crate::prompting::{render, PromptError, PromptSpec, Template};
use crate::retrieval::{EmbedError, QueryKind, RetrievalError, Retriever, ShotSet};
use crate::termbank::TermBank;
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Mt(#[from] MtError),
    #[error("roundtrip failed: {0}")]
    Roundtrip(#[from] RoundtripError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    /// Roundtrip-translate the query before prompting.
    RtFirst,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ShotMode {
    None,
    Random(usize),
    /// Sketch-first similar examples.
    Similar(usize),
}

impl ShotMode {
    pub fn k(self) -> usize {
        match self {
            ShotMode::None => 0,
            ShotMode::Random(k) | ShotMode::Similar(k) => k,
        }
    }
}

impl fmt::Display for ShotMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShotMode::None => f.write_str("none"),
            ShotMode::Random(k) => write!(f, "random:{k}"),
            ShotMode::Similar(k) => write!(f, "similar:{k}"),
        }
    }
}

impl FromStr for ShotMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "none" {
            return Ok(ShotMode::None);
        }
        let (mode, k) = s
            .split_once(':')
            .ok_or_else(|| format!("shot mode {s:?} is not none, random:k or similar:k"))?;
        let k: usize = k.parse().map_err(|_| format!("bad shot count in {s:?}"))?;
        match (mode, k) {
            (_, 0) => Ok(ShotMode::None),
            ("random", k) => Ok(ShotMode::Random(k)),
            ("similar", k) => Ok(ShotMode::Similar(k)),
            _ => Err(format!("unknown shot mode {mode:?}")),
        }
    }
}

impl From<ShotMode> for String {
    fn from(m: ShotMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for ShotMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub route: Route,
    pub shots: ShotMode,
    pub seed: u64,
    pub include_terms: bool,
    /// Fail the query instead of falling back to the direct route when the
    /// roundtrip fails.
    pub fail_hard: bool,
    pub template: Template,
    pub style: String,
    pub pivot: String,
}

impl TransferConfig {
    pub fn new(style: impl Into<String>) -> Self {
        Self {
            route: Route::RtFirst,
            shots: ShotMode::None,
            seed: 0,
            include_terms: false,
            fail_hard: false,
            template: Template::I,
            style: style.into(),
            pivot: "zh".into(),
        }
    }

    fn prompt_spec(&self) -> PromptSpec {
        PromptSpec::new(self.template, self.shots.k(), self.style.clone()).with_terms(self.include_terms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub query: String,
    /// Text the prompt was built around: the roundtrip output, or the query
    /// itself on the direct route.
    pub neutral: String,
    pub output: String,
    pub sketch: Option<String>,
    pub prompt: String,
    pub shot_ids: Vec<String>,
    pub term_count: usize,
    pub route: Route,
    /// Set when the roundtrip failed and the direct route was used instead.
    pub degraded: bool,
    pub generation_calls: u32,
}

/// Everything a transfer needs, borrowed.
#[derive(Clone, Copy)]
pub struct Transferer<'a> {
    pub gateway: Option<&'a MtGateway>,
    pub llm: &'a dyn Generator,
    pub retriever: Option<&'a Retriever>,
    pub bank: Option<&'a TermBank>,
    pub config: &'a TransferConfig,
}

/// Strips an echoed prompt, keeps text up to the first blank line and trims.
pub fn postprocess(raw: &str, prompt: &str) -> String {
    let text = raw.strip_prefix(prompt).unwrap_or(raw);
    let text = text.trim_start_matches(['\n', '\r']);
    let cut = text.find("\n\n").or_else(|| text.find("\r\n\r\n"));
    let text = match cut {
        Some(i) => &text[..i],
        None => text,
    };
    text.trim().to_string()
}

impl<'a> Transferer<'a> {
    pub fn new(llm: &'a dyn Generator, config: &'a TransferConfig) -> Self {
        Self {
            gateway: None,
            llm,
            retriever: None,
            bank: None,
            config,
        }
    }

    pub fn with_gateway(mut self, gateway: &'a MtGateway) -> Self {
        self.gateway = Some(gateway);
        self
    }

    pub fn with_retriever(mut self, retriever: &'a Retriever) -> Self {
        self.retriever = Some(retriever);
        self
    }

    pub fn with_bank(mut self, bank: &'a TermBank) -> Self {
        self.bank = Some(bank);
        self
    }

    fn validate(&self) -> Result<(), InferenceError> {
        if self.config.route == Route::RtFirst && self.gateway.is_none() {
            return Err(InferenceError::Config("rt_first route needs an MT gateway".into()));
        }
        if self.config.shots != ShotMode::None && self.retriever.is_none() {
            return Err(InferenceError::Config(format!(
                "shot mode {} needs a retrieval index",
                self.config.shots
            )));
        }
        Ok(())
    }

    pub fn transfer(&self, query: &str) -> Result<TransferResult, InferenceError> {
        self.validate()?;
        let rt = match self.config.route {
            Route::RtFirst => Some(
                self.gateway
                    .expect("validated")
                    .roundtrip(query, &self.config.pivot)?,
            ),
            Route::Direct => None,
        };
        self.finish(query, rt)
    }

    /// Transfers every query, keeping input order. Roundtrips are batched;
    /// generation runs in parallel and one failing query does not stop the rest.
    pub fn batch_transfer(&self, queries: &[String]) -> Result<Vec<Result<TransferResult, InferenceError>>, InferenceError> {
        self.validate()?;
        let rts: Vec<Option<Result<RoundtripResult, RoundtripError>>> = match self.config.route {
            Route::RtFirst => self
                .gateway
                .expect("validated")
                .roundtrip_batch(queries, &self.config.pivot)?
                .into_iter()
                .map(Some)
                .collect(),
            Route::Direct => vec![None; queries.len()],
        };
        Ok(queries
            .par_iter()
            .zip(rts)
            .map(|(q, rt)| self.finish(q, rt))
            .collect())
    }

    fn finish(
        &self,
        query: &str,
        rt: Option<Result<RoundtripResult, RoundtripError>>,
    ) -> Result<TransferResult, InferenceError> {
        let cfg = self.config;
        let (neutral, route, degraded) = match rt {
            None => (query.to_string(), Route::Direct, false),
            Some(Ok(r)) => (r.neutral, Route::RtFirst, false),
            Some(Err(e)) if cfg.fail_hard => return Err(e.into()),
            Some(Err(e)) => {
                warn!(error = %e, "roundtrip failed; transferring directly");
                (query.to_string(), Route::Direct, true)
            }
        };
        let terms = match (cfg.include_terms, self.bank) {
            (true, Some(bank)) => bank.match_triggers(&neutral),
            _ => Vec::new(),
        };
        let spec = cfg.prompt_spec();
        let seed = derive_seed(cfg.seed, query);
        let mut calls = 0u32;
        let mut sketch = None;
        let shots = match cfg.shots {
            ShotMode::None => ShotSet::empty(QueryKind::Random),
            ShotMode::Random(k) => self.retriever.expect("validated").retrieve_random_shots(seed, k, None)?,
            ShotMode::Similar(k) => {
                let retriever = self.retriever.expect("validated");
                let first = retriever.retrieve_random_shots(seed, k, None)?;
                let prompt = render(&spec, &neutral, &first, &terms)?;
                let draft = postprocess(&self.llm.generate(&prompt.text)?, &prompt.text);
                calls += 1;
                let second = match retriever.retrieve_sketch_shots(&draft, k) {
                    Ok(s) => s,
                    Err(RetrievalError::Embed(EmbedError::ZeroVector | EmbedError::EmptyText)) => {
                        warn!("sketch has no features; keeping first-round examples");
                        first
                    }
                    Err(e) => return Err(e.into()),
                };
                sketch = Some(draft);
                second
            }
        };
        let prompt = render(&spec, &neutral, &shots, &terms)?;
        let output = postprocess(&self.llm.generate(&prompt.text)?, &prompt.text);
        calls += 1;
        Ok(TransferResult {
            query: query.to_string(),
            neutral,
            output,
            sketch,
            shot_ids: prompt.shot_ids,
            term_count: prompt.term_count,
            prompt: prompt.text,
            route,
            degraded,
            generation_calls: calls,
        })
    }
}
