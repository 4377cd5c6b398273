use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting;
use crate::termbank;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("generation backend returned HTTP {0}")]
    Status(u16),
    #[error("malformed generation response: {0}")]
    Malformed(String),
    #[error("invalid generation backend spec: {0}")]
    InvalidSpec(String),
}

/// A text-completion model.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, GenError>;
}

impl<G: Generator + ?Sized> Generator for Arc<G> {
    fn generate(&self, prompt: &str) -> Result<String, GenError> {
        (**self).generate(prompt)
    }
}

/// Word-level substitution table applied by the rulebook backend.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rulebook {
    pub rules: BTreeMap<String, String>,
}

impl Rulebook {
    pub fn new<I, A, B>(rules: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        Self {
            rules: rules.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
        }
    }

    fn lookup(&self, core: &str) -> Option<String> {
        if let Some(to) = self.rules.get(core) {
            return Some(to.clone());
        }
        let mut chars = core.chars();
        let first = chars.next()?;
        if !first.is_uppercase() {
            return None;
        }
        let lowered: String = first.to_lowercase().chain(chars).collect();
        self.rules.get(&lowered).map(|to| {
            let mut c = to.chars();
            c.next()
                .map(|f| f.to_uppercase().chain(c).collect())
                .unwrap_or_default()
        })
    }

    /// Rewrites each whitespace token whose alphanumeric core is a rule key.
    /// Leading and trailing punctuation is kept; a capitalized token matches
    /// its lowercase key and the replacement is capitalized.
    pub fn apply(&self, text: &str) -> String {
        text.split_whitespace()
            .map(|token| {
                let Some((start, end)) = core_span(token) else {
                    return token.to_string();
                };
                match self.lookup(&token[start..end]) {
                    Some(to) => format!("{}{}{}", &token[..start], to, &token[end..]),
                    None => token.to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rule keys occurring as words of `text`, in order of first appearance.
    pub fn keys_in(&self, text: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for token in text.split_whitespace() {
            let Some((start, end)) = core_span(token) else { continue };
            let core = &token[start..end];
            let key = if self.rules.contains_key(core) {
                Some(core.to_string())
            } else {
                let lowered = core.to_lowercase();
                self.rules.contains_key(&lowered).then_some(lowered)
            };
            if let Some(key) = key {
                if !out.contains(&key) {
                    out.push(key);
                }
            }
        }
        out
    }
}

fn core_span(token: &str) -> Option<(usize, usize)> {
    let start = token.find(|c: char| c.is_alphanumeric())?;
    let last = token.rfind(|c: char| c.is_alphanumeric())?;
    let end = last + token[last..].chars().next()?.len_utf8();
    Some((start, end))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenKind {
    HttpCompletion { endpoint: String },
    MockEcho,
    MockRulebook { rules: Rulebook },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenBackendSpec {
    pub backend_id: String,
    #[serde(flatten)]
    pub kind: GenKind,
    #[serde(default)]
    pub model_tag: String,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
}

fn default_max_new_tokens() -> u32 {
    256
}

impl GenBackendSpec {
    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.temperature >= 0.0) {
            return Err(GenError::InvalidSpec(format!(
                "{}: temperature must be >= 0",
                self.backend_id
            )));
        }
        if let GenKind::HttpCompletion { endpoint } = &self.kind {
            if endpoint.trim().is_empty() {
                return Err(GenError::InvalidSpec(format!(
                    "{}: http_completion needs an endpoint",
                    self.backend_id
                )));
            }
        }
        Ok(())
    }

    pub fn connect(&self, api_key: Option<String>) -> Result<Arc<dyn Generator>, GenError> {
        self.validate()?;
        Ok(match &self.kind {
            GenKind::HttpCompletion { endpoint } => Arc::new(HttpGenerator::new(
                endpoint.clone(),
                self.model_tag.clone(),
                self.max_new_tokens,
                self.temperature,
                api_key,
            )?),
            GenKind::MockEcho => Arc::new(EchoGenerator),
            GenKind::MockRulebook { rules } => Arc::new(RulebookGenerator::new(rules.clone())),
        })
    }
}

/// Returns the query slot of a style-transfer prompt unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoGenerator;

impl Generator for EchoGenerator {
    fn generate(&self, prompt: &str) -> Result<String, GenError> {
        Ok(prompting::extract_query(prompt).unwrap_or_else(|| prompt.to_string()))
    }
}

/// Deterministic stand-in for a finetuned model.
///
/// Style-transfer prompts get the rulebook applied to their query. The two
/// terminology prompts are answered from the rule keys: extraction lists the
/// keys present in the sentence, alignment returns the rule value when it
/// occurs in the target sentence.
#[derive(Debug, Clone)]
pub struct RulebookGenerator {
    rules: Rulebook,
}

impl RulebookGenerator {
    pub fn new(rules: Rulebook) -> Self {
        Self { rules }
    }
}

impl Generator for RulebookGenerator {
    fn generate(&self, prompt: &str) -> Result<String, GenError> {
        if let Some(query) = prompting::extract_query(prompt) {
            return Ok(self.rules.apply(&query));
        }
        if let Some(sentence) = termbank::parse_extract_prompt(prompt) {
            return Ok(self.rules.keys_in(sentence).join(", "));
        }
        if let Some((word, sentence)) = termbank::parse_align_prompt(prompt) {
            let answer = self
                .rules
                .rules
                .get(word)
                .filter(|to| sentence.to_lowercase().contains(&to.to_lowercase()))
                .cloned()
                .unwrap_or_default();
            return Ok(answer);
        }
        Err(GenError::Malformed("rulebook backend cannot parse prompt".into()))
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

/// `POST {"model","prompt","max_tokens","temperature"} -> {"text"}`.
pub struct HttpGenerator {
    endpoint: String,
    model: String,
    max_tokens: u32,
    temperature: f64,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpGenerator {
    pub fn new(
        endpoint: String,
        model: String,
        max_tokens: u32,
        temperature: f64,
        api_key: Option<String>,
    ) -> Result<Self, GenError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GenError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint,
            model,
            max_tokens,
            temperature,
            api_key,
            client,
        })
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, prompt: &str) -> Result<String, GenError> {
        let mut request = self.client.post(&self.endpoint).json(&CompletionRequest {
            model: &self.model,
            prompt,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| GenError::Transport(e.to_string()))?;
        if response.status() != reqwest::StatusCode::OK {
            return Err(GenError::Status(response.status().as_u16()));
        }
        let body: CompletionResponse = response
            .json()
            .map_err(|e| GenError::Malformed(e.to_string()))?;
        Ok(body.text)
    }
}

/// Wraps a generator and counts calls.
pub struct CountingGenerator<G> {
    inner: G,
    calls: AtomicU64,
}

impl<G: Generator> CountingGenerator<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<G: Generator> Generator for CountingGenerator<G> {
    fn generate(&self, prompt: &str) -> Result<String, GenError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(prompt)
    }
}
