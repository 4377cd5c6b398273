//! The pipeline stages and their runner.
//!
//! Work directory layout:
//! `corpus/` cleaned records, `rt/` roundtrip outputs, `pairs/` pseudo-parallel
//! pairs, `splits/` partitions, `index/` retrieval index, `termbank/`,
//! `ft/` finetuning shards and trainer manifest, `infer/` transfer outputs,
//! `eval/` classifiers and scores, `report/` rendered tables, `manifests/`
//! stage manifests and `cache/` the translation cache.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{info, warn};

use stylepipe_core::corpus::{self, CorpusRecord, CorpusStats, Dropped};
use stylepipe_core::dataset::{self, DatasetSplit, PairDrop, PseudoPair};
use stylepipe_core::emitter::{self, EmitConfig, TrainManifest};
use stylepipe_core::eval::{
    build_report, BleuMode, EvalReport, HttpClassifier, LinearClassifier, MethodRun, StyleJudge, TrainReport,
    RT_BASELINE,
};
use stylepipe_core::inference::{Generator, Route, Transferer};
use stylepipe_core::mt::{MtClient, MtGateway, RetryPolicy, RoundtripError, RoundtripResult, TranslationCache};
use stylepipe_core::retrieval::{Embedder, HashedTfidf, HttpEmbedder, Retriever, VectorIndex};
use stylepipe_core::termbank::{self, BankStats, TermBank};
use stylepipe_core::util::{read_jsonl, write_jsonl};

use crate::config::{api_key, LoadedConfig, ServiceKind};
use crate::manifest::{checksums, file_key, ManifestError, StageManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Roundtrip,
    BuildDataset,
    Index,
    Termbank,
    EmitFt,
    Infer,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Roundtrip,
        Stage::BuildDataset,
        Stage::Index,
        Stage::Termbank,
        Stage::EmitFt,
        Stage::Infer,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Roundtrip => "roundtrip",
            Stage::BuildDataset => "build-dataset",
            Stage::Index => "index",
            Stage::Termbank => "termbank",
            Stage::EmitFt => "emit-ft",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| anyhow!("unknown stage {s}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran { degraded: bool },
    Skipped { degraded: bool },
}

impl StageStatus {
    pub fn degraded(self) -> bool {
        match self {
            StageStatus::Ran { degraded } | StageStatus::Skipped { degraded } => degraded,
        }
    }
}

struct StageOutput {
    files: Vec<PathBuf>,
    degraded: bool,
    notes: Vec<String>,
}

impl StageOutput {
    fn new(files: Vec<PathBuf>) -> Self {
        Self {
            files,
            degraded: false,
            notes: Vec::new(),
        }
    }
}

/// One roundtrip outcome as stored under `rt/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtEntry {
    pub id: String,
    pub pivot_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neutral: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RoundtripError>,
}

impl RtEntry {
    fn from_result(id: &str, pivot: &str, r: Result<RoundtripResult, RoundtripError>) -> Self {
        match r {
            Ok(r) => Self {
                id: id.to_string(),
                pivot_lang: r.pivot_lang,
                pivot_text: Some(r.pivot_text),
                neutral: Some(r.neutral),
                error: None,
            },
            Err(e) => Self {
                id: id.to_string(),
                pivot_lang: pivot.to_string(),
                pivot_text: None,
                neutral: None,
                error: Some(e),
            },
        }
    }

    fn into_result(self, original: &str) -> Result<RoundtripResult, RoundtripError> {
        match (self.neutral, self.error) {
            (Some(neutral), None) => Ok(RoundtripResult {
                original: original.to_string(),
                pivot_text: self.pivot_text.unwrap_or_default(),
                neutral,
                pivot_lang: self.pivot_lang,
                forward_backend: String::new(),
                backward_backend: String::new(),
                cache_hit: (false, false),
            }),
            (_, Some(e)) => Err(e),
            (None, None) => Err(RoundtripError {
                stage: stylepipe_core::mt::RoundtripStage::Backward,
                original: original.to_string(),
                message: "no roundtrip output recorded".into(),
            }),
        }
    }
}

/// One transferred test sentence as stored under `infer/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub id: String,
    pub source: String,
    pub output: String,
    pub neutral: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch: Option<String>,
    pub shot_ids: Vec<String>,
    pub term_count: usize,
    pub route: Option<Route>,
    /// Roundtrip failed and the direct route was used.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainCorpusSummary {
    pub stats: CorpusStats,
    pub segmented: usize,
    pub dropped: usize,
    pub invalid_utf8: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainPairSummary {
    pub records: usize,
    pub pairs: usize,
    pub rt_failures: usize,
    pub dropped: usize,
    pub trivial_pairs: usize,
    pub failure_rate: f64,
    pub degraded: bool,
    pub train: usize,
    pub heldout_classifier: usize,
    pub test: usize,
}

pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_jsonl(path, items).with_context(|| format!("writing {}", path.display()))
}

/// Runs stages against one config and work directory.
pub struct Pipeline {
    pub cfg: LoadedConfig,
    pub work: PathBuf,
    pub force: bool,
}

impl Pipeline {
    pub fn new(cfg: LoadedConfig) -> Self {
        let work = cfg.work_dir();
        Self {
            cfg,
            work,
            force: false,
        }
    }

    pub fn with_work_dir(mut self, work: PathBuf) -> Self {
        self.work = work;
        self
    }

    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.work.join(rel)
    }

    pub fn corpus_path(&self, d: &str) -> PathBuf {
        self.p(&format!("corpus/{d}.jsonl"))
    }

    pub fn rt_path(&self, d: &str) -> PathBuf {
        self.p(&format!("rt/{d}.jsonl"))
    }

    pub fn pairs_path(&self, d: &str) -> PathBuf {
        self.p(&format!("pairs/{d}.jsonl"))
    }

    pub fn split_path(&self, d: &str) -> PathBuf {
        self.p(&format!("splits/{d}.json"))
    }

    pub fn embedder_path(&self, d: &str) -> PathBuf {
        self.p(&format!("index/{d}.embedder"))
    }

    pub fn index_path(&self, d: &str) -> PathBuf {
        self.p(&format!("index/{d}.index"))
    }

    pub fn termbank_path(&self, d: &str) -> PathBuf {
        self.p(&format!("termbank/{d}.jsonl"))
    }

    pub fn ft_dir(&self, d: &str) -> PathBuf {
        self.p(&format!("ft/{d}"))
    }

    pub fn infer_path(&self, d: &str, method: &str) -> PathBuf {
        self.p(&format!("infer/{d}/{}.jsonl", slug(method)))
    }

    pub fn classifier_path(&self, d: &str) -> PathBuf {
        self.p(&format!("eval/{d}.classifier"))
    }

    pub fn eval_report_path(&self) -> PathBuf {
        self.p("eval/report.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.p("report")
    }

    fn targets(&self) -> Vec<String> {
        self.cfg.config.target_domains().map(|d| d.name.clone()).collect()
    }

    fn all_domains(&self) -> Vec<String> {
        self.cfg.config.domains.iter().map(|d| d.name.clone()).collect()
    }

    fn method_names(&self) -> Vec<String> {
        let mut names = vec![RT_BASELINE.to_string()];
        names.extend(self.cfg.config.methods.iter().map(|m| m.name.clone()));
        names
    }

    fn uses_builtin_embedder(&self) -> bool {
        self.cfg.config.embedder.kind == ServiceKind::Builtin
    }

    fn index_files(&self, d: &str) -> Vec<PathBuf> {
        let mut v = vec![self.index_path(d)];
        if self.uses_builtin_embedder() {
            v.push(self.embedder_path(d));
        }
        v
    }

    fn inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let c = &self.cfg.config;
        let t = self.targets();
        let mut v = Vec::new();
        match stage {
            Stage::Ingest => v.extend(c.domains.iter().map(|d| self.cfg.resolve(&d.corpus))),
            Stage::Roundtrip => {
                v.extend(t.iter().map(|d| self.corpus_path(d)));
                v.extend(self.mt_table_files());
            }
            Stage::BuildDataset => {
                v.extend(self.all_domains().iter().map(|d| self.corpus_path(d)));
                v.extend(t.iter().map(|d| self.rt_path(d)));
            }
            Stage::Index => {
                for d in &t {
                    v.push(self.pairs_path(d));
                    v.push(self.split_path(d));
                }
            }
            Stage::Termbank => {
                for d in &t {
                    v.push(self.pairs_path(d));
                    v.push(self.split_path(d));
                }
                v.extend(c.generation.rules.iter().map(|r| self.cfg.resolve(r)));
            }
            Stage::EmitFt => {
                for d in &t {
                    v.push(self.pairs_path(d));
                    v.push(self.split_path(d));
                    v.extend(self.index_files(d));
                    v.push(self.termbank_path(d));
                }
            }
            Stage::Infer => {
                for d in &t {
                    v.push(self.corpus_path(d));
                    v.push(self.split_path(d));
                    v.push(self.pairs_path(d));
                    v.extend(self.index_files(d));
                    v.push(self.termbank_path(d));
                }
                v.extend(self.mt_table_files());
                v.extend(c.generation.rules.iter().map(|r| self.cfg.resolve(r)));
            }
            Stage::Evaluate => {
                for d in self.all_domains() {
                    v.push(self.corpus_path(&d));
                    v.push(self.split_path(&d));
                }
                for d in &t {
                    for m in self.method_names() {
                        v.push(self.infer_path(d, &m));
                    }
                }
            }
            Stage::Report => {
                v.push(self.p("corpus/summary.json"));
                v.push(self.p("pairs/summary.json"));
                v.push(self.eval_report_path());
                v.push(self.p("eval/classifiers.json"));
            }
        }
        v
    }

    fn mt_table_files(&self) -> Vec<PathBuf> {
        self.cfg
            .config
            .mt
            .pivots
            .iter()
            .flat_map(|p| [&p.forward, &p.backward])
            .filter_map(|b| b.substitutions.as_ref().map(|s| self.cfg.resolve(s)))
            .collect()
    }

    fn fingerprint(&self, stage: Stage) -> String {
        let c = &self.cfg.config;
        let domains: Vec<_> = c
            .domains
            .iter()
            .map(|d| json!({"name": d.name, "heldout": d.heldout_fraction, "target": d.target, "style": d.style()}))
            .collect();
        let value = match stage {
            Stage::Ingest => json!({"domains": domains, "clean": c.clean}),
            Stage::Roundtrip => json!({"mt": c.mt, "pivot": c.pivot}),
            Stage::BuildDataset => json!({"domains": domains, "pairs": c.pairs}),
            Stage::Index => json!({"embedder": c.embedder}),
            Stage::Termbank => json!({"termbank": c.termbank, "generation": c.generation}),
            Stage::EmitFt => json!({"prompt": c.prompt, "finetune": c.finetune, "seed": c.seed, "domains": domains}),
            Stage::Infer => json!({
                "methods": c.methods, "generation": c.generation, "mt": c.mt, "pivot": c.pivot,
                "seed": c.seed, "prompt": c.prompt, "domains": domains, "embedder": c.embedder,
            }),
            Stage::Evaluate => json!({"classifier": c.classifier, "eval": c.eval, "seed": c.seed, "methods": c.methods}),
            Stage::Report => json!({"eval": c.eval}),
        };
        let value = json!({"stage": stage.name(), "version": 1, "config": value});
        crate::config::RunConfig::fingerprint_of(&value)
    }

    /// Checks inputs produced by earlier stages against their manifests.
    fn verify_upstream(&self, inputs: &[PathBuf]) -> Result<()> {
        let mut recorded: HashMap<String, String> = HashMap::new();
        for stage in Stage::ALL {
            if let Some(m) = StageManifest::load(&self.work, stage.name())? {
                recorded.extend(m.outputs);
            }
        }
        for path in inputs {
            let key = file_key(&self.work, path);
            if let Some(expected) = recorded.get(&key) {
                let found = stylepipe_core::util::file_sha256(path)
                    .map_err(|_| ManifestError::Missing { path: path.clone() })?;
                if &found != expected {
                    return Err(ManifestError::ChecksumMismatch {
                        path: path.clone(),
                        expected: expected.clone(),
                        found,
                    }
                    .into());
                }
            } else if !path.is_file() {
                bail!("input {} does not exist; run the earlier stages first", path.display());
            }
        }
        Ok(())
    }

    pub fn run(&self, stage: Stage) -> Result<StageStatus> {
        let inputs = self.inputs(stage);
        self.verify_upstream(&inputs).with_context(|| format!("stage {stage}"))?;
        let input_sums = checksums(&self.work, &inputs)?;
        let fingerprint = self.fingerprint(stage);
        if !self.force {
            if let Some(m) = StageManifest::load(&self.work, stage.name())? {
                if m.matches(&fingerprint, &input_sums) {
                    m.verify_outputs(&self.work).with_context(|| format!("stage {stage}"))?;
                    info!(%stage, "unchanged; skipped");
                    return Ok(StageStatus::Skipped { degraded: m.degraded });
                }
            }
        }
        info!(%stage, "running");
        let out = self.execute(stage).with_context(|| format!("stage {stage} failed"))?;
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            config_fingerprint: fingerprint,
            inputs: input_sums,
            outputs: checksums(&self.work, &out.files)?,
            degraded: out.degraded,
            notes: out.notes,
        };
        manifest.save(&self.work)?;
        if out.degraded {
            warn!(%stage, "stage finished degraded");
        }
        Ok(StageStatus::Ran { degraded: out.degraded })
    }

    pub fn run_all(&self) -> Result<Vec<(Stage, StageStatus)>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            out.push((stage, self.run(stage)?));
        }
        Ok(out)
    }

    fn execute(&self, stage: Stage) -> Result<StageOutput> {
        match stage {
            Stage::Ingest => self.ingest(),
            Stage::Roundtrip => self.roundtrip(),
            Stage::BuildDataset => self.build_dataset(),
            Stage::Index => self.index(),
            Stage::Termbank => self.termbank(),
            Stage::EmitFt => self.emit_ft(),
            Stage::Infer => self.infer(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
    }

    fn ingest(&self) -> Result<StageOutput> {
        self.cfg.check_paths()?;
        let c = &self.cfg.config;
        let mut files = Vec::new();
        let mut summary = BTreeMap::new();
        for d in &c.domains {
            let report = corpus::ingest(&self.cfg.resolve(&d.corpus), &d.domain())?;
            for w in &report.warnings {
                warn!(domain = %d.name, "{w}");
            }
            let cleaned = corpus::clean(&report.records, &c.clean);
            info!(domain = %d.name, kept = cleaned.kept.len(), dropped = cleaned.dropped.len(), "corpus cleaned");
            ensure!(!cleaned.kept.is_empty(), "domain {} has no usable sentences", d.name);
            let path = self.corpus_path(&d.name);
            save_jsonl(&path, &cleaned.kept)?;
            let drops = self.p(&format!("corpus/{}.dropped.jsonl", d.name));
            save_jsonl::<Dropped>(&drops, &cleaned.dropped)?;
            summary.insert(
                d.name.clone(),
                DomainCorpusSummary {
                    stats: CorpusStats::of(&cleaned.kept),
                    segmented: report.records.len(),
                    dropped: cleaned.dropped.len(),
                    invalid_utf8: report.invalid_utf8,
                    warnings: report.warnings,
                },
            );
            files.push(path);
            files.push(drops);
        }
        let summary_path = self.p("corpus/summary.json");
        write_json(&summary_path, &summary)?;
        files.push(summary_path);
        Ok(StageOutput::new(files))
    }

    pub fn gateway(&self) -> Result<MtGateway> {
        let c = &self.cfg.config;
        let cache_path = self.p("cache/mt.jsonl");
        let cache = Arc::new(TranslationCache::open(&cache_path).with_context(|| format!("opening {}", cache_path.display()))?);
        let retry = RetryPolicy {
            attempts: c.mt.retry_attempts.max(1),
            base_delay: Duration::from_millis(500),
            jitter: true,
        };
        let mut gateway = MtGateway::new();
        for p in &c.mt.pivots {
            let client = |b| -> Result<MtClient> {
                Ok(MtClient::from_spec(self.cfg.mt_spec(b)?, cache.clone(), api_key())?
                    .with_retry(retry)
                    .with_batch_size(c.mt.batch_size)
                    .with_max_in_flight(c.mt.max_in_flight))
            };
            gateway.add_pivot(&p.pivot, client(&p.forward)?, client(&p.backward)?)?;
        }
        Ok(gateway)
    }

    fn roundtrip(&self) -> Result<StageOutput> {
        let c = &self.cfg.config;
        let gateway = self.gateway()?;
        let mut files = Vec::new();
        for d in self.targets() {
            let records: Vec<CorpusRecord> = load_jsonl(&self.corpus_path(&d))?;
            let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
            let results = gateway.roundtrip_batch(&texts, &c.pivot)?;
            let entries: Vec<RtEntry> = records
                .iter()
                .zip(results)
                .map(|(r, res)| RtEntry::from_result(&r.id, &c.pivot, res))
                .collect();
            let failed = entries.iter().filter(|e| e.error.is_some()).count();
            info!(domain = %d, total = entries.len(), failed, calls = gateway.calls(), "roundtrip done");
            let path = self.rt_path(&d);
            save_jsonl(&path, &entries)?;
            files.push(path);
        }
        Ok(StageOutput::new(files))
    }

    fn build_dataset(&self) -> Result<StageOutput> {
        let c = &self.cfg.config;
        let mut files = Vec::new();
        let mut summary = BTreeMap::new();
        let mut out = StageOutput::new(Vec::new());
        for d in &c.domains {
            let records: Vec<CorpusRecord> = load_jsonl(&self.corpus_path(&d.name))?;
            let mut s = DomainPairSummary {
                records: records.len(),
                ..Default::default()
            };
            let pairs = if d.target {
                let entries: Vec<RtEntry> = load_jsonl(&self.rt_path(&d.name))?;
                ensure!(
                    entries.len() == records.len() && entries.iter().zip(&records).all(|(e, r)| e.id == r.id),
                    "{} is out of step with {}",
                    self.rt_path(&d.name).display(),
                    self.corpus_path(&d.name).display()
                );
                let rts: Vec<_> = entries
                    .into_iter()
                    .zip(&records)
                    .map(|(e, r)| e.into_result(&r.text))
                    .collect();
                let outcome = dataset::assemble_pairs(&records, &rts, &c.pairs);
                s.pairs = outcome.pairs.len();
                s.rt_failures = outcome.rt_failures;
                s.dropped = outcome.dropped.len();
                s.trivial_pairs = outcome.trivial_pairs();
                s.failure_rate = outcome.failure_rate();
                s.degraded = outcome.degraded();
                if s.degraded {
                    out.degraded = true;
                    out.notes.push(format!(
                        "{}: roundtrip failure rate {:.1}% exceeds {:.0}%",
                        d.name,
                        100.0 * s.failure_rate,
                        100.0 * dataset::DEGRADED_FAILURE_RATE
                    ));
                }
                let pairs_path = self.pairs_path(&d.name);
                save_jsonl(&pairs_path, &outcome.pairs)?;
                let drops = self.p(&format!("pairs/{}.dropped.jsonl", d.name));
                save_jsonl::<PairDrop>(&drops, &outcome.dropped)?;
                files.push(pairs_path);
                files.push(drops);
                outcome.pairs
            } else {
                Vec::new()
            };
            let split = dataset::split(&pairs, &records, &d.domain());
            s.train = split.train.len();
            s.heldout_classifier = split.heldout_classifier.len();
            s.test = split.test.len();
            if d.target {
                ensure!(s.train > 0, "domain {}: no training pairs", d.name);
                ensure!(s.test > 0, "domain {}: empty test split", d.name);
            }
            let split_path = self.split_path(&d.name);
            write_json(&split_path, &split)?;
            files.push(split_path);
            summary.insert(d.name.clone(), s);
        }
        let summary_path = self.p("pairs/summary.json");
        write_json(&summary_path, &summary)?;
        files.push(summary_path);
        out.files = files;
        Ok(out)
    }

    fn train_pairs(&self, d: &str) -> Result<Vec<PseudoPair>> {
        let pairs: Vec<PseudoPair> = load_jsonl(&self.pairs_path(d))?;
        let split: DatasetSplit = read_json(&self.split_path(d))?;
        Ok(split.train_pairs(&pairs).into_iter().cloned().collect())
    }

    fn http_embedder(&self) -> Result<Arc<dyn Embedder>> {
        let e = &self.cfg.config.embedder;
        let endpoint = e.endpoint.clone().context("embedder.endpoint is required for http_service")?;
        Ok(Arc::new(HttpEmbedder::new(endpoint, e.model_tag.clone(), e.dim)?))
    }

    fn index(&self) -> Result<StageOutput> {
        let mut files = Vec::new();
        for d in self.targets() {
            let pairs = self.train_pairs(&d)?;
            let embedder: Arc<dyn Embedder> = match self.cfg.config.embedder.kind {
                ServiceKind::Builtin => {
                    let docs: Vec<&str> = pairs.iter().map(|p| p.target.as_str()).collect();
                    let model = HashedTfidf::fit(self.cfg.config.embedder.dim, &docs);
                    let path = self.embedder_path(&d);
                    fs::create_dir_all(path.parent().expect("has parent"))?;
                    model.save(&path)?;
                    files.push(path);
                    Arc::new(model)
                }
                ServiceKind::HttpService => self.http_embedder()?,
            };
            let retriever = Retriever::build(&pairs, embedder)?;
            let path = self.index_path(&d);
            retriever.index().save(&path)?;
            info!(domain = %d, entries = retriever.index().len(), "index built");
            files.push(path);
        }
        Ok(StageOutput::new(files))
    }

    pub fn retriever(&self, d: &str) -> Result<Retriever> {
        let embedder: Arc<dyn Embedder> = match self.cfg.config.embedder.kind {
            ServiceKind::Builtin => Arc::new(HashedTfidf::load(&self.embedder_path(d))?),
            ServiceKind::HttpService => self.http_embedder()?,
        };
        let index = VectorIndex::load(&self.index_path(d), &embedder.fingerprint())?;
        Ok(Retriever::from_parts(index, &self.train_pairs(d)?, embedder)?)
    }

    pub fn generator(&self) -> Result<Arc<dyn Generator>> {
        Ok(self.cfg.gen_spec()?.connect(api_key())?)
    }

    fn termbank(&self) -> Result<StageOutput> {
        let c = &self.cfg.config;
        let mut files = Vec::new();
        for d in self.targets() {
            let (bank, stats) = if c.termbank.enabled {
                let llm = self.generator()?;
                termbank::build_bank(&self.train_pairs(&d)?, llm.as_ref(), &d, c.termbank.min_support)?
            } else {
                (TermBank::empty(), BankStats::default())
            };
            let path = self.termbank_path(&d);
            bank.save(&path)?;
            let stats_path = self.p(&format!("termbank/{d}.stats.json"));
            write_json(&stats_path, &stats)?;
            files.push(path);
            files.push(stats_path);
        }
        Ok(StageOutput::new(files))
    }

    fn emit_ft(&self) -> Result<StageOutput> {
        let c = &self.cfg.config;
        let mut files = Vec::new();
        for d in c.target_domains() {
            let pairs = self.train_pairs(&d.name)?;
            let retriever = self.retriever(&d.name)?;
            let bank = TermBank::load(&self.termbank_path(&d.name))?;
            let config = EmitConfig {
                spec: c.train_prompt_spec(d.style()),
                shots: c.prompt.train_shots,
                seed: c.seed,
            };
            let records = emitter::build_records(&pairs, &config, Some(&retriever), Some(&bank))?;
            let dir = self.ft_dir(&d.name);
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            let shards = emitter::write_shards(&dir, &records, c.finetune.shard_records)?;
            let manifest = TrainManifest::new(&c.finetune.base_model, Path::new(&format!("ft/{}", d.name)), &shards, c.prompt.template, c.seed)
                .with_lora(c.finetune.lora.clone());
            let manifest_path = dir.join("manifest.json");
            manifest.save(&manifest_path)?;
            files.extend(shards.shards.iter().map(|s| dir.join(s)));
            files.push(manifest_path);
        }
        Ok(StageOutput::new(files))
    }

    fn test_records(&self, d: &str) -> Result<Vec<CorpusRecord>> {
        let records: Vec<CorpusRecord> = load_jsonl(&self.corpus_path(d))?;
        let split: DatasetSplit = read_json(&self.split_path(d))?;
        Ok(DatasetSplit::select(&split.test, &records).into_iter().cloned().collect())
    }

    fn infer(&self) -> Result<StageOutput> {
        let c = &self.cfg.config;
        let gateway = self.gateway()?;
        let llm = self.generator()?;
        let mut out = StageOutput::new(Vec::new());
        for d in c.target_domains() {
            let tests = self.test_records(&d.name)?;
            let queries: Vec<String> = tests.iter().map(|r| r.text.clone()).collect();
            let retriever = self.retriever(&d.name)?;
            let bank = TermBank::load(&self.termbank_path(&d.name))?;

            // Untransferred roundtrip output.
            let rts = gateway.roundtrip_batch(&queries, &c.pivot)?;
            let baseline: Vec<InferRecord> = tests
                .iter()
                .zip(rts)
                .map(|(r, rt)| match rt {
                    Ok(rt) => InferRecord {
                        id: r.id.clone(),
                        source: r.text.clone(),
                        output: rt.neutral.clone(),
                        neutral: rt.neutral,
                        sketch: None,
                        shot_ids: vec![],
                        term_count: 0,
                        route: Some(Route::RtFirst),
                        fallback: false,
                        error: None,
                    },
                    Err(e) => InferRecord {
                        id: r.id.clone(),
                        source: r.text.clone(),
                        output: String::new(),
                        neutral: String::new(),
                        sketch: None,
                        shot_ids: vec![],
                        term_count: 0,
                        route: None,
                        fallback: false,
                        error: Some(e.to_string()),
                    },
                })
                .collect();
            self.finish_method(&mut out, &d.name, RT_BASELINE, baseline)?;

            for m in &c.methods {
                let tcfg = c.transfer_config(m, d.style());
                let t = Transferer::new(llm.as_ref(), &tcfg)
                    .with_gateway(&gateway)
                    .with_retriever(&retriever)
                    .with_bank(&bank);
                let results = t.batch_transfer(&queries)?;
                let records: Vec<InferRecord> = tests
                    .iter()
                    .zip(results)
                    .map(|(r, res)| match res {
                        Ok(t) => InferRecord {
                            id: r.id.clone(),
                            source: r.text.clone(),
                            output: t.output,
                            neutral: t.neutral,
                            sketch: t.sketch,
                            shot_ids: t.shot_ids,
                            term_count: t.term_count,
                            route: Some(t.route),
                            fallback: t.degraded,
                            error: None,
                        },
                        Err(e) => InferRecord {
                            id: r.id.clone(),
                            source: r.text.clone(),
                            output: String::new(),
                            neutral: String::new(),
                            sketch: None,
                            shot_ids: vec![],
                            term_count: 0,
                            route: None,
                            fallback: false,
                            error: Some(e.to_string()),
                        },
                    })
                    .collect();
                self.finish_method(&mut out, &d.name, &m.name, records)?;
            }
        }
        Ok(out)
    }

    fn finish_method(&self, out: &mut StageOutput, domain: &str, method: &str, records: Vec<InferRecord>) -> Result<()> {
        let bad = records.iter().filter(|r| r.error.is_some() || r.fallback).count();
        let frac = bad as f64 / records.len().max(1) as f64;
        info!(domain, method, n = records.len(), failed_or_fallback = bad, "transfer done");
        if frac > self.cfg.config.eval.max_degraded_fraction {
            out.degraded = true;
            out.notes.push(format!(
                "{domain}/{method}: {bad} of {} queries failed or fell back",
                records.len()
            ));
        }
        let path = self.infer_path(domain, method);
        save_jsonl(&path, &records)?;
        out.files.push(path);
        Ok(())
    }

    fn method_fingerprint(&self, method: &str) -> String {
        let c = &self.cfg.config;
        let gen = format!("gen={}:{}", c.generation.backend_id, c.generation.model_tag);
        let embed = match c.embedder.kind {
            ServiceKind::Builtin => format!("embed=hashed_tfidf:dim={}", c.embedder.dim),
            ServiceKind::HttpService => format!("embed=http_service:{}:dim={}", c.embedder.model_tag, c.embedder.dim),
        };
        match c.methods.iter().find(|m| m.name == method) {
            Some(m) => format!(
                "route={}|shots={}|terms={}|template={}|pivot={}|{gen}|{embed}|seed={}",
                serde_json::to_value(m.route).expect("serializable").as_str().unwrap_or_default(),
                m.shots,
                m.include_terms,
                m.template.unwrap_or(c.prompt.template),
                c.pivot,
                c.seed
            ),
            None => format!("route=rt_only|pivot={}", c.pivot),
        }
    }

    fn evaluate(&self) -> Result<StageOutput> {
        let c = &self.cfg.config;
        let mut files = Vec::new();
        let mut judges: BTreeMap<String, Box<dyn StyleJudge>> = BTreeMap::new();
        let mut train_reports: BTreeMap<String, TrainReport> = BTreeMap::new();
        let heldout = |d: &str| -> Result<Vec<String>> {
            let records: Vec<CorpusRecord> = load_jsonl(&self.corpus_path(d))?;
            let split: DatasetSplit = read_json(&self.split_path(d))?;
            Ok(DatasetSplit::select(&split.heldout_classifier, &records)
                .into_iter()
                .map(|r| r.text.clone())
                .collect())
        };
        for d in self.targets() {
            let judge: Box<dyn StyleJudge> = match c.classifier.kind {
                ServiceKind::Builtin => {
                    let positives = heldout(&d)?;
                    let mut negatives = Vec::new();
                    for other in self.all_domains().iter().filter(|o| **o != d) {
                        negatives.extend(heldout(other)?);
                    }
                    ensure!(
                        !negatives.is_empty(),
                        "domain {d}: the style classifier needs held-out text from at least one other domain"
                    );
                    let (model, report) = LinearClassifier::train(&positives, &negatives, c.seed, &c.classifier.train)?;
                    info!(domain = %d, val_acc = report.validation_accuracy, epochs = report.epochs, "classifier trained");
                    let path = self.classifier_path(&d);
                    model.save(&path)?;
                    files.push(path);
                    train_reports.insert(d.clone(), report);
                    Box::new(model)
                }
                ServiceKind::HttpService => Box::new(HttpClassifier::new(
                    c.classifier.endpoint.clone().context("classifier.endpoint is required for http_service")?,
                    c.classifier.model_tag.clone(),
                )?),
            };
            judges.insert(d, judge);
        }
        let clf_path = self.p("eval/classifiers.json");
        write_json(&clf_path, &train_reports)?;
        files.push(clf_path);

        let mut runs = Vec::new();
        for d in self.targets() {
            for m in self.method_names() {
                let records: Vec<InferRecord> = load_jsonl(&self.infer_path(&d, &m))?;
                let bad = records.iter().filter(|r| r.error.is_some() || r.fallback).count();
                runs.push(MethodRun {
                    method: m.clone(),
                    domain: d.clone(),
                    sources: records.iter().map(|r| r.source.clone()).collect(),
                    outputs: records.iter().map(|r| r.output.clone()).collect(),
                    references: None,
                    fingerprint: self.method_fingerprint(&m),
                    degraded: bad as f64 / records.len().max(1) as f64 > c.eval.max_degraded_fraction,
                });
            }
        }
        ensure!(c.eval.bleu_mode == BleuMode::Source, "reference-mode BLEU needs gold references, which the pipeline does not produce");
        let report = build_report(&runs, |d| judges.get(d).map(|j| j.as_ref()), &c.eval.bleu(), c.eval.bleu_mode)?;
        let degraded = report.any_degraded();
        let path = self.eval_report_path();
        fs::write(&path, report.to_json())?;
        files.push(path);
        let mut out = StageOutput::new(files);
        out.degraded = degraded;
        Ok(out)
    }

    fn report(&self) -> Result<StageOutput> {
        let corpus: BTreeMap<String, DomainCorpusSummary> = read_json(&self.p("corpus/summary.json"))?;
        let pairs: BTreeMap<String, DomainPairSummary> = read_json(&self.p("pairs/summary.json"))?;
        let classifiers: BTreeMap<String, TrainReport> = read_json(&self.p("eval/classifiers.json"))?;
        let mut report: EvalReport = read_json(&self.eval_report_path())?;
        report.notes.push(
            "Sentence segmentation and corpus cleaning use this toolkit's own rules (min 3 / max 150 tokens, \
             at least 60% alphabetic characters, exact dedup); corpus sizes depend on them."
                .into(),
        );
        let dir = self.report_dir();
        fs::create_dir_all(&dir)?;

        let mut md = String::from("# Style transfer report\n\n## Corpora\n\n| Dataset | Type | Sentences | Words |\n|---|---|---:|---:|\n");
        for (name, s) in &corpus {
            md.push_str(&format!("| {} |\n", s.stats.table_row(name)));
        }
        md.push_str("\n## Pseudo-parallel data\n\n| Domain | Records | Pairs | RT failures | Dropped | Trivial | Train | Classifier held-out | Test |\n|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
        for (name, s) in &pairs {
            md.push_str(&format!(
                "| {name}{} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                if s.degraded { " (degraded)" } else { "" },
                s.records,
                s.pairs,
                s.rt_failures,
                s.dropped,
                s.trivial_pairs,
                s.train,
                s.heldout_classifier,
                s.test
            ));
        }
        if !classifiers.is_empty() {
            md.push_str("\n## Style classifiers\n\n| Domain | Train acc | Validation acc | Epochs |\n|---|---:|---:|---:|\n");
            for (name, r) in &classifiers {
                md.push_str(&format!(
                    "| {name} | {:.3} | {:.3} | {} |\n",
                    r.train_accuracy, r.validation_accuracy, r.epochs
                ));
            }
        }
        md.push_str("\n## Results\n\n");
        md.push_str(&report.to_markdown());
        md.push_str("\n## Method fingerprints\n\n");
        for r in &report.rows {
            md.push_str(&format!("- {} / {}: `{}`\n", r.method, r.domain, r.fingerprint));
        }

        let md_path = dir.join("report.md");
        let csv_path = dir.join("report.csv");
        let json_path = dir.join("report.json");
        fs::write(&md_path, md)?;
        fs::write(&csv_path, report.to_csv())?;
        fs::write(&json_path, report.to_json())?;
        let mut out = StageOutput::new(vec![md_path, csv_path, json_path]);
        out.degraded = report.any_degraded() || pairs.values().any(|p| p.degraded);
        Ok(out)
    }
}
