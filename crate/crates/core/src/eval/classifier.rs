//! Linear style classifier over hashed character n-grams.
//!
//! Logistic regression trained with full-batch gradient descent on the mean
//! log-loss plus an L2 penalty on the weights (not the bias). Features are
//! the L2-normalized n-gram counts used by the retrieval embedder.

use std::fs;
use std::io::{self, Read};
use std::path::Path;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::EvalError;
use crate::retrieval::NgramHasher;

pub const DEFAULT_CLASSIFIER_DIM: usize = 1 << 14;
const MAGIC: &[u8; 4] = b"SPCL";
const VERSION: u32 = 1;

/// Decides whether texts belong to the target style.
pub trait StyleJudge: Send + Sync {
    fn fingerprint(&self) -> String;
    fn predict(&self, texts: &[String]) -> Result<Vec<bool>, EvalError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Stop once the training loss changes by less than this.
    pub tolerance: f64,
    pub validation_fraction: f64,
    pub dim: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            l2: 1e-4,
            max_epochs: 200,
            tolerance: 1e-7,
            validation_fraction: 0.2,
            dim: DEFAULT_CLASSIFIER_DIM,
        }
    }
}

pub type SparseVec = Vec<(u32, f32)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub train_size: usize,
    pub validation_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    hasher: NgramHasher,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(z)) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(w: &[f64], x: &SparseVec) -> f64 {
    x.iter().map(|&(i, v)| w[i as usize] * v as f64).sum()
}

/// Mean logistic loss plus `l2 / 2 * |w|^2`, with its gradient in `w` and `b`.
pub fn loss_and_gradient(w: &[f64], b: f64, xs: &[SparseVec], ys: &[bool], l2: f64) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut grad: Vec<f64> = w.iter().map(|wi| l2 * wi).collect();
    let mut grad_b = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = dot(w, x) + b;
        // -log σ(z) for positives, -log(1-σ(z)) for negatives.
        loss += if y { softplus(-z) } else { softplus(z) };
        let r = (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n;
        for &(i, v) in x {
            grad[i as usize] += r * v as f64;
        }
        grad_b += r;
    }
    loss = loss / n + 0.5 * l2 * w.iter().map(|wi| wi * wi).sum::<f64>();
    (loss, grad, grad_b)
}

impl LinearClassifier {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn probability(&self, text: &str) -> f64 {
        sigmoid(dot(&self.weights, &self.hasher.normalized(text)) + self.bias)
    }

    pub fn is_in_domain(&self, text: &str) -> bool {
        self.probability(text) >= 0.5
    }

    /// Trains on in-domain (label 1) versus out-of-domain (label 0) texts.
    /// A seeded shuffle holds out `validation_fraction` of each class.
    pub fn train(
        in_domain: &[String],
        out_domain: &[String],
        seed: u64,
        params: &TrainParams,
    ) -> Result<(Self, TrainReport), EvalError> {
        if in_domain.is_empty() || out_domain.is_empty() {
            return Err(EvalError::EmptyInput);
        }
        if !(0.0..1.0).contains(&params.validation_fraction) || params.dim == 0 {
            return Err(EvalError::InvalidConfig("bad classifier parameters".into()));
        }
        let hasher = NgramHasher::new(params.dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for (texts, label) in [(in_domain, true), (out_domain, false)] {
            let mut order: Vec<usize> = (0..texts.len()).collect();
            order.shuffle(&mut rng);
            let n_valid = (texts.len() as f64 * params.validation_fraction).round() as usize;
            let n_valid = n_valid.min(texts.len() - 1);
            for (j, &i) in order.iter().enumerate() {
                let item = (hasher.normalized(&texts[i]), label);
                if j < n_valid {
                    valid.push(item);
                } else {
                    train.push(item);
                }
            }
        }
        let (xs, ys): (Vec<SparseVec>, Vec<bool>) = train.into_iter().unzip();
        // Per-example updates over a seeded shuffle. Weights are kept as
        // `scale * v` so the L2 shrink of every step costs O(1).
        let mut v = vec![0.0; params.dim];
        let mut scale = 1.0f64;
        let mut b = 0.0;
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut previous = f64::INFINITY;
        let mut epochs = 0;
        let mut loss = f64::NAN;
        let decay = 1.0 - params.learning_rate * params.l2;
        for epoch in 0..params.max_epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let z = scale * dot(&v, &xs[i]) + b;
                let g = sigmoid(z) - if ys[i] { 1.0 } else { 0.0 };
                scale *= decay;
                if scale < 1e-9 {
                    v.iter_mut().for_each(|x| *x *= scale);
                    scale = 1.0;
                }
                for &(j, xj) in &xs[i] {
                    v[j as usize] -= params.learning_rate * g * f64::from(xj) / scale;
                }
                b -= params.learning_rate * g;
            }
            epochs = epoch + 1;
            let w: Vec<f64> = v.iter().map(|x| x * scale).collect();
            loss = loss_and_gradient(&w, b, &xs, &ys, params.l2).0;
            if (previous - loss).abs() < params.tolerance {
                break;
            }
            previous = loss;
        }
        let w: Vec<f64> = v.iter().map(|x| x * scale).collect();
        let model = Self {
            weights: w,
            bias: b,
            hasher,
        };
        let accuracy = |set: &[(SparseVec, bool)]| -> f64 {
            if set.is_empty() {
                return f64::NAN;
            }
            let right = set
                .iter()
                .filter(|(x, y)| (sigmoid(dot(&model.weights, x) + model.bias) >= 0.5) == *y)
                .count();
            right as f64 / set.len() as f64
        };
        let train_set: Vec<(SparseVec, bool)> = xs.into_iter().zip(ys).collect();
        let report = TrainReport {
            epochs,
            final_loss: loss,
            train_accuracy: accuracy(&train_set),
            validation_accuracy: accuracy(&valid),
            train_size: train_set.len(),
            validation_size: valid.len(),
        };
        debug!(?report, "classifier trained");
        Ok((model, report))
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let fp = self.fingerprint();
        let mut buf = Vec::with_capacity(16 + fp.len() + self.weights.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
        buf.extend_from_slice(fp.as_bytes());
        buf.extend_from_slice(&(self.weights.len() as u32).to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        buf.extend_from_slice(&self.bias.to_le_bytes());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, buf)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
        let mut r = bytes.as_slice();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a classifier file"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut u32buf)?;
        let mut fp = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut fp)?;
        r.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if r.len() != dim * 8 + 8 || dim == 0 {
            return Err(bad("truncated weights"));
        }
        let mut f = [0u8; 8];
        let mut weights = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut f)?;
            weights.push(f64::from_le_bytes(f));
        }
        r.read_exact(&mut f)?;
        let model = Self {
            weights,
            bias: f64::from_le_bytes(f),
            hasher: NgramHasher::new(dim),
        };
        if model.fingerprint().as_bytes() != fp.as_slice() {
            return Err(bad("fingerprint does not match contents"));
        }
        if !model.weights.iter().all(|w| w.is_finite()) || !model.bias.is_finite() {
            return Err(bad("non-finite weights"));
        }
        Ok(model)
    }
}

impl StyleJudge for LinearClassifier {
    fn fingerprint(&self) -> String {
        format!("builtin_linear:char3-5:fnv1a64:dim={}", self.dim())
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<bool>, EvalError> {
        Ok(texts.iter().map(|t| self.is_in_domain(t)).collect())
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct ClassifyResponse {
    labels: Vec<u8>,
}

/// External classifier: `POST {"texts":[...]} -> {"labels":[0|1,...]}`.
pub struct HttpClassifier {
    endpoint: String,
    model_tag: String,
    client: reqwest::blocking::Client,
}

impl HttpClassifier {
    pub fn new(endpoint: impl Into<String>, model_tag: impl Into<String>) -> Result<Self, EvalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EvalError::Service(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model_tag: model_tag.into(),
            client,
        })
    }
}

impl StyleJudge for HttpClassifier {
    fn fingerprint(&self) -> String {
        format!("http_service:{}", self.model_tag)
    }

    fn predict(&self, texts: &[String]) -> Result<Vec<bool>, EvalError> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(&ClassifyRequest { texts })
            .send()
            .map_err(|e| EvalError::Service(e.to_string()))?;
        if response.status() != reqwest::StatusCode::OK {
            return Err(EvalError::Service(format!("HTTP {}", response.status().as_u16())));
        }
        let body: ClassifyResponse = response.json().map_err(|e| EvalError::Service(e.to_string()))?;
        if body.labels.len() != texts.len() {
            return Err(EvalError::Service(format!(
                "expected {} labels, got {}",
                texts.len(),
                body.labels.len()
            )));
        }
        body.labels
            .into_iter()
            .map(|l| match l {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(EvalError::Service(format!("label {other} is not 0 or 1"))),
            })
            .collect()
    }
}
