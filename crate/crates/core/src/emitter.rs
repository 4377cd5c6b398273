//! Finetuning dataset and trainer manifest.
//!
//! Every training pair becomes one `{prompt, completion, meta}` JSON line.
//! Records are written to numbered shards; the manifest handed to the trainer
//! names the shards, their combined checksum and the LoRA hyperparameters.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::dataset::PseudoPair;
use crate::prompting::{render_training_record, PromptError, PromptSpec, Template};
use crate::retrieval::{QueryKind, RetrievalError, Retriever, ShotSet};
use crate::termbank::TermBank;
use crate::util::derive_seed;

pub const SHARD_RECORDS: usize = 50_000;
/// Records longer than this (prompt plus completion, in chars) are logged.
pub const LONG_RECORD_CHARS: usize = 8000;

#[derive(Debug, Error)]
pub enum EmitError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("no training pairs to emit")]
    Empty,
    #[error("shot mode needs a retrieval index")]
    MissingIndex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub pair_id: String,
    pub template: Template,
    pub shot_ids: Vec<String>,
    pub term_count: usize,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub prompt: String,
    pub completion: String,
    pub meta: RecordMeta,
}

/// How examples are chosen for training prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainShots {
    None,
    Random,
    /// Neighbours of the pair's own target side.
    Similar,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitConfig {
    pub spec: PromptSpec,
    pub shots: TrainShots,
    pub seed: u64,
}

/// One record per pair, in input order.
pub fn build_records(
    pairs: &[PseudoPair],
    config: &EmitConfig,
    retriever: Option<&Retriever>,
    bank: Option<&TermBank>,
) -> Result<Vec<FinetuneRecord>, EmitError> {
    let k = config.spec.k;
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let shots = match (config.shots, k) {
            (TrainShots::None, _) | (_, 0) => ShotSet::empty(QueryKind::TargetSide),
            (TrainShots::Similar, k) => retriever.ok_or(EmitError::MissingIndex)?.retrieve_train_shots(pair, k)?,
            (TrainShots::Random, k) => retriever.ok_or(EmitError::MissingIndex)?.retrieve_random_shots(
                derive_seed(config.seed, &format!("train:{}", pair.id)),
                k,
                Some(&pair.id),
            )?,
        };
        let terms = match (config.spec.include_terms, bank) {
            (true, Some(bank)) => bank.match_triggers(&pair.neutral),
            _ => Vec::new(),
        };
        let (prompt, completion) = render_training_record(&config.spec, pair, &shots, &terms)?;
        let chars = prompt.text.chars().count() + completion.chars().count();
        if chars > LONG_RECORD_CHARS {
            warn!(id = %pair.id, chars, "long finetuning record");
        }
        out.push(FinetuneRecord {
            prompt: prompt.text,
            completion,
            meta: RecordMeta {
                pair_id: pair.id.clone(),
                template: prompt.template,
                shot_ids: prompt.shot_ids,
                term_count: prompt.term_count,
                domain: pair.domain.clone(),
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSet {
    /// Shard file names relative to the output directory.
    pub shards: Vec<String>,
    pub records: usize,
    /// SHA-256 over the shard bytes in order.
    pub checksum: String,
}

pub fn shard_name(i: usize) -> String {
    format!("train-{i:05}.jsonl")
}

/// Writes records as `train-00000.jsonl`, `train-00001.jsonl`, ... with at
/// most `per_shard` records each.
pub fn write_shards(dir: &Path, records: &[FinetuneRecord], per_shard: usize) -> Result<ShardSet, EmitError> {
    if records.is_empty() {
        return Err(EmitError::Empty);
    }
    fs::create_dir_all(dir)?;
    let mut hasher = Sha256::new();
    let mut shards = Vec::new();
    for (i, chunk) in records.chunks(per_shard.max(1)).enumerate() {
        let name = shard_name(i);
        let mut buf = Vec::new();
        for r in chunk {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        hasher.update(&buf);
        let mut w = BufWriter::new(File::create(dir.join(&name))?);
        w.write_all(&buf)?;
        w.flush()?;
        shards.push(name);
    }
    let set = ShardSet {
        shards,
        records: records.len(),
        checksum: hex::encode(hasher.finalize()),
    };
    info!(records = set.records, shards = set.shards.len(), "finetuning data written");
    Ok(set)
}

/// Recomputes the combined checksum of the shards on disk.
pub fn shard_checksum(dir: &Path, shards: &[String]) -> io::Result<String> {
    let mut hasher = Sha256::new();
    for s in shards {
        hasher.update(fs::read(dir.join(s))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraParams {
    pub learning_rate: f64,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub dtype: String,
    pub dropout: f64,
    /// Checkpoint and evaluation interval in optimizer steps.
    pub save_eval_steps: u32,
}

impl Default for LoraParams {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            lora_rank: 512,
            lora_alpha: 256,
            dtype: "float16".into(),
            dropout: 0.05,
            save_eval_steps: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub base_model: String,
    pub dataset_path: PathBuf,
    pub shards: Vec<String>,
    pub records: usize,
    pub dataset_checksum: String,
    pub template: Template,
    pub seed: u64,
    #[serde(flatten)]
    pub lora: LoraParams,
    /// Hyperparameters changed from their defaults, as `name=value`.
    #[serde(default)]
    pub overrides: Vec<String>,
}

impl LoraParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0) || self.lora_rank == 0 || self.lora_alpha == 0 || self.save_eval_steps == 0 {
            return Err("learning_rate, lora_rank, lora_alpha and save_eval_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !matches!(self.dtype.as_str(), "float16" | "bfloat16" | "float32") {
            return Err(format!("unknown dtype {}", self.dtype));
        }
        Ok(())
    }
}

impl TrainManifest {
    pub fn new(base_model: &str, dataset_dir: &Path, shards: &ShardSet, template: Template, seed: u64) -> Self {
        Self {
            base_model: base_model.to_string(),
            dataset_path: dataset_dir.to_path_buf(),
            shards: shards.shards.clone(),
            records: shards.records,
            dataset_checksum: shards.checksum.clone(),
            template,
            seed,
            lora: LoraParams::default(),
            overrides: Vec::new(),
        }
    }

    /// Applies overrides, logging each one that differs from the default.
    pub fn with_lora(mut self, lora: LoraParams) -> Self {
        let base = serde_json::to_value(LoraParams::default()).expect("serializable");
        let new = serde_json::to_value(&lora).expect("serializable");
        if let (Some(base), Some(new)) = (base.as_object(), new.as_object()) {
            for (k, v) in new {
                if base.get(k) != Some(v) {
                    info!(param = %k, value = %v, "trainer hyperparameter override");
                    self.overrides.push(format!("{k}={v}"));
                }
            }
        }
        self.lora = lora;
        self
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(path, text)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(io::Error::other)
    }
}
