//! Run configuration: one TOML file describing domains, backends and methods.
//!
//! `${NAME}` and `${NAME:-fallback}` are expanded from the environment before
//! parsing. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{bail, ensure, Context, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};

use stylepipe_core::corpus::{CleanPolicy, StyleDomain};
use stylepipe_core::dataset::PairFilterPolicy;
use stylepipe_core::emitter::{LoraParams, TrainShots};
use stylepipe_core::eval::{BleuConfig, BleuMode, TrainParams};
use stylepipe_core::inference::{GenBackendSpec, GenKind, Route, Rulebook, ShotMode, TransferConfig};
use stylepipe_core::mt::{MtBackendSpec, MtKind, ScrambleConfig};
use stylepipe_core::prompting::{PromptSpec, Template};
use stylepipe_core::util::sha256_hex;

pub const ENV_MT_URL: &str = "STYLEPIPE_MT_URL";
pub const ENV_LLM_URL: &str = "STYLEPIPE_LLM_URL";
pub const ENV_API_KEY: &str = "STYLEPIPE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_pivot")]
    pub pivot: String,
    pub domains: Vec<DomainConfig>,
    #[serde(default)]
    pub clean: CleanPolicy,
    #[serde(default)]
    pub pairs: PairFilterPolicy,
    pub mt: MtConfig,
    pub generation: GenConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub termbank: TermbankConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

fn default_pivot() -> String {
    "zh".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub heldout_fraction: f64,
    pub corpus: PathBuf,
    /// Target styles get pairs, an index, a term bank and transfer runs;
    /// other domains only supply out-of-domain classifier data.
    #[serde(default)]
    pub target: bool,
    /// Style name used in prompts; defaults to the domain name.
    #[serde(default)]
    pub style: Option<String>,
}

impl DomainConfig {
    pub fn domain(&self) -> StyleDomain {
        StyleDomain {
            name: self.name.clone(),
            description: self.description.clone(),
            heldout_fraction: self.heldout_fraction,
        }
    }

    pub fn style(&self) -> &str {
        self.style.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtConfig {
    #[serde(default = "default_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    pub pivots: Vec<PivotConfig>,
}

fn default_attempts() -> u32 {
    3
}

fn default_batch() -> usize {
    32
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PivotConfig {
    pub pivot: String,
    pub forward: MtBackendConfig,
    pub backward: MtBackendConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtBackendKind {
    Http,
    MockIdentity,
    MockScramble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtBackendConfig {
    pub backend_id: String,
    pub kind: MtBackendKind,
    pub src_lang: String,
    pub tgt_lang: String,
    #[serde(default)]
    pub model_tag: String,
    /// HTTP endpoint; falls back to STYLEPIPE_MT_URL.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Two-column TSV of word substitutions for the scramble mock.
    #[serde(default)]
    pub substitutions: Option<PathBuf>,
    #[serde(default)]
    pub inverse: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenBackendKind {
    HttpCompletion,
    MockEcho,
    MockRulebook,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub backend_id: String,
    pub kind: GenBackendKind,
    #[serde(default)]
    pub model_tag: String,
    /// HTTP endpoint; falls back to STYLEPIPE_LLM_URL.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Two-column TSV of rewrite rules for the rulebook mock.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
}

fn default_max_new_tokens() -> u32 {
    256
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Builtin,
    HttpService,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    #[serde(default = "builtin")]
    pub kind: ServiceKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_tag: String,
}

fn builtin() -> ServiceKind {
    ServiceKind::Builtin
}

fn default_dim() -> usize {
    1 << 14
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: ServiceKind::Builtin,
            dim: default_dim(),
            endpoint: None,
            model_tag: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    #[serde(default = "builtin")]
    pub kind: ServiceKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_tag: String,
    #[serde(default)]
    pub train: TrainParams,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ServiceKind::Builtin,
            endpoint: None,
            model_tag: String::new(),
            train: TrainParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotOrder {
    MostSimilarLast,
    MostSimilarFirst,
}

/// Prompt settings for the finetuning data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    #[serde(default = "default_template")]
    pub template: Template,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_train_shots")]
    pub train_shots: TrainShots,
    #[serde(default = "yes")]
    pub include_terms: bool,
    #[serde(default = "default_order")]
    pub shot_order: ShotOrder,
}

fn default_template() -> Template {
    Template::I
}

fn default_k() -> usize {
    5
}

fn default_train_shots() -> TrainShots {
    TrainShots::Similar
}

fn yes() -> bool {
    true
}

fn default_order() -> ShotOrder {
    ShotOrder::MostSimilarLast
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            template: default_template(),
            k: default_k(),
            train_shots: default_train_shots(),
            include_terms: true,
            shot_order: default_order(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermbankConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_min_support")]
    pub min_support: u32,
}

fn default_min_support() -> u32 {
    stylepipe_core::termbank::DEFAULT_MIN_SUPPORT
}

impl Default for TermbankConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_support: default_min_support(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_base_model")]
    pub base_model: String,
    #[serde(default = "default_shard_records")]
    pub shard_records: usize,
    #[serde(default)]
    pub lora: LoraParams,
}

fn default_base_model() -> String {
    "meta-llama/Meta-Llama-3-8B".into()
}

fn default_shard_records() -> usize {
    stylepipe_core::emitter::SHARD_RECORDS
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            base_model: default_base_model(),
            shard_records: default_shard_records(),
            lora: LoraParams::default(),
        }
    }
}

/// One inference variant, reported as one row per target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub name: String,
    #[serde(default = "default_route")]
    pub route: Route,
    #[serde(default = "default_shots")]
    pub shots: ShotMode,
    #[serde(default)]
    pub include_terms: bool,
    #[serde(default)]
    pub template: Option<Template>,
    #[serde(default)]
    pub fail_hard: bool,
}

fn default_route() -> Route {
    Route::RtFirst
}

fn default_shots() -> ShotMode {
    ShotMode::Similar(5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_bleu_mode")]
    pub bleu_mode: BleuMode,
    #[serde(default = "yes")]
    pub case_sensitive: bool,
    /// Largest share of fallbacks or failures before a run counts as degraded.
    #[serde(default = "default_degraded")]
    pub max_degraded_fraction: f64,
}

fn default_bleu_mode() -> BleuMode {
    BleuMode::Source
}

fn default_degraded() -> f64 {
    stylepipe_core::dataset::DEGRADED_FAILURE_RATE
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bleu_mode: default_bleu_mode(),
            case_sensitive: true,
            max_degraded_fraction: default_degraded(),
        }
    }
}

impl EvalConfig {
    pub fn bleu(&self) -> BleuConfig {
        BleuConfig {
            case_sensitive: self.case_sensitive,
            ..BleuConfig::corpus()
        }
    }
}

/// Replaces `${NAME}` and `${NAME:-fallback}` with environment values.
pub fn interpolate_env(text: &str) -> Result<String> {
    static VAR: OnceLock<Regex> = OnceLock::new();
    let re = VAR.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}").expect("static pattern"));
    let mut missing = None;
    let out = re.replace_all(text, |caps: &regex::Captures| match env::var(&caps[1]) {
        Ok(v) => v,
        Err(_) => match caps.get(2) {
            Some(fallback) => fallback.as_str().to_string(),
            None => {
                missing.get_or_insert_with(|| caps[1].to_string());
                String::new()
            }
        },
    });
    if let Some(name) = missing {
        bail!("environment variable {name} is referenced in the config but not set");
    }
    Ok(out.into_owned())
}

/// Reads a two-column tab-separated table; `#` starts a comment line.
pub fn read_tsv_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .with_context(|| format!("{}:{}: expected two tab-separated columns", path.display(), n + 1))?;
        ensure!(
            map.insert(a.trim().to_string(), b.trim().to_string()).is_none(),
            "{}:{}: duplicate key {:?}",
            path.display(),
            n + 1,
            a.trim()
        );
    }
    Ok(map)
}

/// A parsed config together with the directory its relative paths hang off.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(&interpolate_env(text)?).context("parsing config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.domains.is_empty(), "no domains configured");
        let mut names = std::collections::BTreeSet::new();
        for d in &self.domains {
            d.domain().validate()?;
            ensure!(names.insert(&d.name), "domain {} listed twice", d.name);
            ensure!(
                d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'),
                "domain name {:?} must be ASCII letters, digits, '-' or '_'",
                d.name
            );
        }
        ensure!(self.domains.iter().any(|d| d.target), "no domain is marked target = true");
        ensure!(
            self.mt.pivots.iter().any(|p| p.pivot == self.pivot),
            "pivot {} has no [[mt.pivots]] entry",
            self.pivot
        );
        let mut methods = std::collections::BTreeSet::new();
        for m in &self.methods {
            ensure!(!m.name.trim().is_empty(), "method with an empty name");
            ensure!(methods.insert(&m.name), "method {} listed twice", m.name);
            ensure!(
                m.name != stylepipe_core::eval::RT_BASELINE,
                "method name {:?} is reserved for the baseline row",
                m.name
            );
        }
        self.finetune.lora.validate().map_err(anyhow::Error::msg)?;
        ensure!(self.finetune.shard_records > 0, "finetune.shard_records must be positive");
        Ok(())
    }

    pub fn target_domains(&self) -> impl Iterator<Item = &DomainConfig> {
        self.domains.iter().filter(|d| d.target)
    }

    pub fn domain(&self, name: &str) -> Option<&DomainConfig> {
        self.domains.iter().find(|d| d.name == name)
    }

    /// Hash of a serializable config fragment, for stage manifests.
    pub fn fingerprint_of<T: Serialize>(parts: &T) -> String {
        sha256_hex(serde_json::to_string(parts).expect("serializable").as_bytes())
    }

    pub fn train_prompt_spec(&self, style: &str) -> PromptSpec {
        let mut spec = PromptSpec::new(self.prompt.template, self.prompt.k, style).with_terms(self.prompt.include_terms);
        spec.most_similar_first = self.prompt.shot_order == ShotOrder::MostSimilarFirst;
        spec
    }

    pub fn transfer_config(&self, method: &MethodConfig, style: &str) -> TransferConfig {
        TransferConfig {
            route: method.route,
            shots: method.shots,
            seed: self.seed,
            include_terms: method.include_terms,
            fail_hard: method.fail_hard,
            template: method.template.unwrap_or(self.prompt.template),
            style: style.to_string(),
            pivot: self.pivot.clone(),
        }
    }
}

impl LoadedConfig {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.config.work_dir)
    }

    pub fn mt_spec(&self, c: &MtBackendConfig) -> Result<MtBackendSpec> {
        let kind = match c.kind {
            MtBackendKind::Http => MtKind::Http {
                endpoint: c
                    .endpoint
                    .clone()
                    .or_else(|| env::var(ENV_MT_URL).ok())
                    .with_context(|| format!("{}: no endpoint and {ENV_MT_URL} unset", c.backend_id))?,
            },
            MtBackendKind::MockIdentity => MtKind::MockIdentity,
            MtBackendKind::MockScramble => MtKind::MockScramble(ScrambleConfig {
                seed: c.seed,
                substitutions: match &c.substitutions {
                    Some(p) => read_tsv_map(&self.resolve(p))?,
                    None => BTreeMap::new(),
                },
                inverse: c.inverse,
            }),
        };
        let spec = MtBackendSpec {
            backend_id: c.backend_id.clone(),
            kind,
            src_lang: c.src_lang.clone(),
            tgt_lang: c.tgt_lang.clone(),
            model_tag: c.model_tag.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn gen_spec(&self) -> Result<GenBackendSpec> {
        let c = &self.config.generation;
        let kind = match c.kind {
            GenBackendKind::HttpCompletion => GenKind::HttpCompletion {
                endpoint: c
                    .endpoint
                    .clone()
                    .or_else(|| env::var(ENV_LLM_URL).ok())
                    .with_context(|| format!("{}: no endpoint and {ENV_LLM_URL} unset", c.backend_id))?,
            },
            GenBackendKind::MockEcho => GenKind::MockEcho,
            GenBackendKind::MockRulebook => GenKind::MockRulebook {
                rules: Rulebook {
                    rules: match &c.rules {
                        Some(p) => read_tsv_map(&self.resolve(p))?,
                        None => bail!("{}: mock_rulebook needs a rules file", c.backend_id),
                    },
                },
            },
        };
        let spec = GenBackendSpec {
            backend_id: c.backend_id.clone(),
            kind,
            model_tag: c.model_tag.clone(),
            max_new_tokens: c.max_new_tokens,
            temperature: c.temperature,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Every input file the config points at.
    pub fn referenced_files(&self) -> Vec<PathBuf> {
        let c = &self.config;
        let mut out: Vec<PathBuf> = c.domains.iter().map(|d| self.resolve(&d.corpus)).collect();
        for p in &c.mt.pivots {
            for b in [&p.forward, &p.backward] {
                if let Some(s) = &b.substitutions {
                    out.push(self.resolve(s));
                }
            }
        }
        if let Some(r) = &c.generation.rules {
            out.push(self.resolve(r));
        }
        out
    }

    pub fn check_paths(&self) -> Result<()> {
        for p in self.referenced_files() {
            ensure!(p.is_file(), "referenced file {} does not exist", p.display());
        }
        Ok(())
    }
}

pub fn api_key() -> Option<String> {
    env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty())
}
