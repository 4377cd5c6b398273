//! BLEU, style accuracy and the results table.

mod bleu;
mod classifier;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{
    corpus_bleu, corpus_stats, segment_stats, sentence_bleu, tokenize_13a, BleuConfig, BleuStats, Smoothing,
};
pub use classifier::{
    loss_and_gradient, HttpClassifier, LinearClassifier, SparseVec, StyleJudge, TrainParams, TrainReport,
    DEFAULT_CLASSIFIER_DIM,
};

/// Method name of the untransferred roundtrip baseline row.
pub const RT_BASELINE: &str = "RT output (no transfer)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("{0} hypotheses but {1} references")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("classifier service: {0}")]
    Service(String),
}

/// Fraction of texts the judge labels in-domain.
pub fn style_accuracy(texts: &[String], judge: &dyn StyleJudge) -> Result<f64, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let labels = judge.predict(texts)?;
    if labels.len() != texts.len() {
        return Err(EvalError::LengthMismatch(labels.len(), texts.len()));
    }
    Ok(labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64)
}

/// What BLEU is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuMode {
    /// The styled source text the query came from.
    Source,
    /// A gold in-style reference, where one exists.
    Reference,
}

/// Outputs of one method on one domain's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: String,
    pub domain: String,
    pub sources: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub references: Option<Vec<String>>,
    /// Identifies templates, k, route, embedder and backends used.
    pub fingerprint: String,
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub domain: String,
    pub bleu: f64,
    pub acc: f64,
    pub n: usize,
    pub fingerprint: String,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu_config: String,
    pub bleu_mode: BleuMode,
    pub rows: Vec<ReportRow>,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn evaluate_run(
    run: &MethodRun,
    judge: &dyn StyleJudge,
    cfg: &BleuConfig,
    mode: BleuMode,
) -> Result<ReportRow, EvalError> {
    let refs = match mode {
        BleuMode::Source => &run.sources,
        BleuMode::Reference => run
            .references
            .as_ref()
            .ok_or_else(|| EvalError::InvalidConfig(format!("{} has no gold references", run.method)))?,
    };
    let bleu = corpus_bleu(&run.outputs, refs, cfg)?;
    let acc = style_accuracy(&run.outputs, judge)?;
    Ok(ReportRow {
        method: run.method.clone(),
        domain: run.domain.clone(),
        bleu,
        acc,
        n: run.outputs.len(),
        fingerprint: format!("{}|{}|judge={}", run.fingerprint, cfg.fingerprint(), judge.fingerprint()),
        degraded: run.degraded,
    })
}

/// One row per run, in run order. `judge_for` picks the classifier of a domain.
pub fn build_report<'a, F>(
    runs: &[MethodRun],
    judge_for: F,
    cfg: &BleuConfig,
    mode: BleuMode,
) -> Result<EvalReport, EvalError>
where
    F: Fn(&str) -> Option<&'a dyn StyleJudge>,
{
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let judge = judge_for(&run.domain)
            .ok_or_else(|| EvalError::InvalidConfig(format!("no classifier for domain {}", run.domain)))?;
        rows.push(evaluate_run(run, judge, cfg, mode)?);
    }
    Ok(EvalReport {
        bleu_config: cfg.fingerprint(),
        bleu_mode: mode,
        rows,
        notes: Vec::new(),
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub fn row(&self, method: &str, domain: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.domain == domain)
    }

    pub fn any_degraded(&self) -> bool {
        self.rows.iter().any(|r| r.degraded)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,domain,bleu,acc,n,degraded,fingerprint\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.3},{},{},{}",
                csv_field(&r.method),
                csv_field(&r.domain),
                r.bleu,
                r.acc,
                r.n,
                r.degraded,
                csv_field(&r.fingerprint)
            );
        }
        out
    }

    /// Methods down the side, one BLEU/Acc column pair per domain.
    pub fn to_markdown(&self) -> String {
        let mut domains: Vec<&str> = Vec::new();
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !domains.contains(&r.domain.as_str()) {
                domains.push(&r.domain);
            }
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        let mut out = String::from("| Method |");
        for d in &domains {
            let _ = write!(out, " {d} BLEU | {d} Acc |");
        }
        out.push_str("\n|---|");
        for _ in &domains {
            out.push_str("---:|---:|");
        }
        out.push('\n');
        for m in &methods {
            let _ = write!(out, "| {m} |");
            for d in &domains {
                match self.row(m, d) {
                    Some(r) => {
                        let mark = if r.degraded { "*" } else { "" };
                        let _ = write!(out, " {:.2}{mark} | {:.3}{mark} |", r.bleu, r.acc);
                    }
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "\nBLEU: {} against {:?} text.\n", self.bleu_config, self.bleu_mode);
        if self.any_degraded() {
            out.push_str("\n\\* degraded run (too many roundtrip failures or fallbacks).\n");
        }
        for note in &self.notes {
            let _ = writeln!(out, "\n{note}");
        }
        out
    }
}
