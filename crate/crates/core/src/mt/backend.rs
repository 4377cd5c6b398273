use std::collections::BTreeMap;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::derive_seed;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned HTTP {0}")]
    Status(u16),
    #[error("malformed backend response: {0}")]
    Malformed(String),
}

/// A translation engine. Implementations must return exactly one output per
/// input, in order.
pub trait Translator: Send + Sync {
    fn translate_batch(
        &self,
        src_lang: &str,
        tgt_lang: &str,
        texts: &[String],
    ) -> Result<Vec<String>, BackendError>;
}

/// Echo backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate_batch(&self, _: &str, _: &str, texts: &[String]) -> Result<Vec<String>, BackendError> {
        Ok(texts.to_vec())
    }
}

/// Seeded token permutation plus word substitution.
///
/// The forward direction substitutes words through `substitutions` and then
/// permutes token positions with a permutation that depends only on the seed
/// and the token count. The inverse direction undoes the permutation first and
/// then substitutes, so a forward config paired with an inverse config
/// carrying the inverted table restores the input exactly.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScrambleConfig {
    pub seed: u64,
    #[serde(default)]
    pub substitutions: BTreeMap<String, String>,
    #[serde(default)]
    pub inverse: bool,
}

impl ScrambleConfig {
    /// The config that undoes `self`. Fails when the table is not one-to-one.
    pub fn inverted(&self) -> Option<ScrambleConfig> {
        let mut table = BTreeMap::new();
        for (from, to) in &self.substitutions {
            if table.insert(to.clone(), from.clone()).is_some() {
                return None;
            }
        }
        Some(ScrambleConfig {
            seed: self.seed,
            substitutions: table,
            inverse: !self.inverse,
        })
    }
}

pub fn token_permutation(seed: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("perm:{len}")));
    order.shuffle(&mut rng);
    order
}

/// Replaces the alphanumeric core of `token` when the table has it. A
/// capitalized token also matches its lowercase entry and keeps the capital.
fn substitute(token: &str, table: &BTreeMap<String, String>) -> String {
    if table.is_empty() {
        return token.to_string();
    }
    let start = token
        .find(|c: char| c.is_alphanumeric())
        .unwrap_or(token.len());
    let end = token
        .rfind(|c: char| c.is_alphanumeric())
        .map(|i| i + token[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(start);
    if start >= end {
        return token.to_string();
    }
    let core = &token[start..end];
    let replaced = if let Some(to) = table.get(core) {
        to.clone()
    } else {
        let mut chars = core.chars();
        let first = chars.next().expect("nonempty core");
        if !first.is_uppercase() {
            return token.to_string();
        }
        let lowered: String = first.to_lowercase().chain(chars).collect();
        match table.get(&lowered) {
            Some(to) => capitalize(to),
            None => return token.to_string(),
        }
    };
    format!("{}{}{}", &token[..start], replaced, &token[end..])
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn scramble(text: &str, config: &ScrambleConfig) -> String {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let perm = token_permutation(config.seed, tokens.len());
    if config.inverse {
        let mut restored = vec![""; tokens.len()];
        for (pos, &src) in perm.iter().enumerate() {
            restored[src] = tokens[pos];
        }
        restored
            .iter()
            .map(|t| substitute(t, &config.substitutions))
            .collect::<Vec<_>>()
            .join(" ")
    } else {
        let substituted: Vec<String> = tokens
            .iter()
            .map(|t| substitute(t, &config.substitutions))
            .collect();
        perm.iter()
            .map(|&src| substituted[src].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct ScrambleTranslator {
    config: ScrambleConfig,
}

impl ScrambleTranslator {
    pub fn new(config: ScrambleConfig) -> Self {
        Self { config }
    }
}

impl Translator for ScrambleTranslator {
    fn translate_batch(&self, _: &str, _: &str, texts: &[String]) -> Result<Vec<String>, BackendError> {
        Ok(texts.iter().map(|t| scramble(t, &self.config)).collect())
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    src: &'a str,
    tgt: &'a str,
    texts: &'a [String],
}

#[derive(Deserialize)]
struct HttpResponse {
    translations: Vec<String>,
}

/// Client for `POST {"src","tgt","texts"} -> {"translations"}`.
pub struct HttpTranslator {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTranslator {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            client,
        })
    }
}

impl Translator for HttpTranslator {
    fn translate_batch(
        &self,
        src_lang: &str,
        tgt_lang: &str,
        texts: &[String],
    ) -> Result<Vec<String>, BackendError> {
        let mut request = self.client.post(&self.endpoint).json(&HttpRequest {
            src: src_lang,
            tgt: tgt_lang,
            texts,
        });
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        if status != reqwest::StatusCode::OK {
            return Err(BackendError::Status(status.as_u16()));
        }
        let body: HttpResponse = response
            .json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        if body.translations.len() != texts.len() {
            return Err(BackendError::Malformed(format!(
                "expected {} translations, got {}",
                texts.len(),
                body.translations.len()
            )));
        }
        Ok(body.translations)
    }
}
