//! The dual-factor heuristic: a linear potential estimator distilled from a
//! teacher policy (forward KL) and a linear progress estimator regressed on
//! normalized completion labels (MSE).
//!
//! Both heads are plain affine maps trained by deterministic mini-batch
//! gradient descent: given the seed, batch order and therefore the trained
//! weights are bit-reproducible. Heads are immutable during inference and
//! freely shareable.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::rng::{salt, stream};
use crate::trace::{FeatureVector, ReasoningTrace, Termination};
use crate::{Error, Result};

/// Linear map from features to logits over the operator set.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialHead {
    /// One row per operator, each of length `dim`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub operator_set_name: String,
}

/// Linear map from features to a scalar progress estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// One token-level supervision pair `(h_k, k/L)`.
#[derive(Debug, Clone)]
pub struct ProgressSample {
    pub features: FeatureVector,
    /// Normalized completion in `(0, 1]`; 1-based token indexing puts the
    /// final token at exactly 1.
    pub label: f64,
}

/// One decision-point distillation pair: features plus the teacher's
/// distribution over the operator set.
#[derive(Debug, Clone)]
pub struct TeacherSample {
    pub features: FeatureVector,
    pub teacher_dist: Vec<f64>,
}

/// Gradient-descent hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Data("learning_rate must be positive".into()));
        }
        if self.l2 < 0.0 {
            return Err(Error::Data("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax_stable(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl PotentialHead {
    pub fn zeros(n_ops: usize, dim: usize, set_name: impl Into<String>) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; n_ops],
            bias: vec![0.0; n_ops],
            operator_set_name: set_name.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn n_ops(&self) -> usize {
        self.weights.len()
    }
}

impl ProgressHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Random initialization from the seed.
    pub fn random_init(dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[salt::INIT]);
        let scale = 0.1 / (dim as f64).sqrt();
        let weights = (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { weights, bias: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Logits and softmax probabilities over the operator set.
pub fn potential_forward(head: &PotentialHead, h: &FeatureVector) -> Result<(Vec<f64>, Vec<f64>)> {
    if h.dim() != head.dim() {
        return Err(Error::DimMismatch {
            expected: head.dim(),
            got: h.dim(),
        });
    }
    let logits: Vec<f64> = head
        .weights
        .iter()
        .zip(&head.bias)
        .map(|(row, b)| dot(row, &h.values) + b)
        .collect();
    let probs = softmax_stable(&logits);
    Ok((logits, probs))
}

/// Raw affine progress estimate. Unbounded: clamping to `[0, 1]` is a
/// reporting concern, not a training one.
pub fn progress_forward(head: &ProgressHead, h: &FeatureVector) -> Result<f64> {
    if h.dim() != head.dim() {
        return Err(Error::DimMismatch {
            expected: head.dim(),
            got: h.dim(),
        });
    }
    Ok(dot(&head.weights, &h.values) + head.bias)
}

/// Forward KL divergence `D(teacher || student)` in nats. Infinite when the
/// student assigns zero mass where the teacher does not.
pub fn kl_loss(teacher: &[f64], student: &[f64]) -> f64 {
    debug_assert_eq!(teacher.len(), student.len());
    let mut sum = 0.0;
    for (&t, &s) in teacher.iter().zip(student) {
        if t > 0.0 {
            if s <= 0.0 {
                return f64::INFINITY;
            }
            sum += t * (t / s).ln();
        }
    }
    sum.max(0.0)
}

/// Mean KL of the head against all samples.
pub fn mean_kl(head: &PotentialHead, data: &[TeacherSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let (_, probs) = potential_forward(head, &s.features)?;
        total += kl_loss(&s.teacher_dist, &probs);
    }
    Ok(total / data.len() as f64)
}

/// Mean squared error of the head against all samples.
pub fn mean_mse(head: &ProgressHead, data: &[ProgressSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let d = progress_forward(head, &s.features)? - s.label;
        total += d * d;
    }
    Ok(total / data.len() as f64)
}

fn check_teacher_data(data: &[TeacherSample], dim: usize, n_ops: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in data {
        if s.features.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: s.features.dim(),
            });
        }
        if s.teacher_dist.len() != n_ops {
            return Err(Error::DimMismatch {
                expected: n_ops,
                got: s.teacher_dist.len(),
            });
        }
        let sum: f64 = s.teacher_dist.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || s.teacher_dist.iter().any(|&p| p < 0.0) {
            return Err(Error::Data(
                "teacher distribution is not a probability vector".into(),
            ));
        }
    }
    Ok(())
}

/// Distill the teacher into the head by mini-batch gradient descent on the
/// forward KL. Returns the trained head and the full-dataset mean KL after
/// initialization and after each epoch.
pub fn train_potential(
    data: &[TeacherSample],
    init: PotentialHead,
    cfg: &TrainConfig,
) -> Result<(PotentialHead, Vec<f64>)> {
    cfg.validate()?;
    let dim = init.dim();
    let n_ops = init.n_ops();
    check_teacher_data(data, dim, n_ops)?;
    let mut head = init;
    let mut curve = vec![mean_kl(&head, data)?];
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, &[salt::SHUFFLE, epoch as u64]);
        indices.shuffle(&mut rng);
        for batch in indices.chunks(cfg.batch_size.max(1)) {
            let mut grad_w = vec![vec![0.0; dim]; n_ops];
            let mut grad_b = vec![0.0; n_ops];
            for &i in batch {
                let s = &data[i];
                let (_, probs) = potential_forward(&head, &s.features)?;
                for j in 0..n_ops {
                    let g = probs[j] - s.teacher_dist[j];
                    grad_b[j] += g;
                    for (gw, &hv) in grad_w[j].iter_mut().zip(&s.features.values) {
                        *gw += g * hv;
                    }
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for j in 0..n_ops {
                for (w, g) in head.weights[j].iter_mut().zip(&grad_w[j]) {
                    *w -= scale * g + cfg.learning_rate * cfg.l2 * *w;
                }
                head.bias[j] -= scale * grad_b[j];
            }
        }
        curve.push(mean_kl(&head, data)?);
    }
    Ok((head, curve))
}

/// Seed the potential head with operator embedding rows; bias starts at zero.
pub fn init_potential_from_embeddings(
    embedding_rows: &[Vec<f64>],
    set_name: impl Into<String>,
) -> Result<PotentialHead> {
    if embedding_rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = embedding_rows[0].len();
    if embedding_rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Data("embedding rows have inconsistent width".into()));
    }
    Ok(PotentialHead {
        weights: embedding_rows.to_vec(),
        bias: vec![0.0; embedding_rows.len()],
        operator_set_name: set_name.into(),
    })
}

/// Fit the progress head by mini-batch gradient descent on the MSE,
/// starting from the seeded random initialization. Returns the head and the
/// loss curve (initial value plus one entry per epoch).
pub fn train_progress(
    data: &[ProgressSample],
    cfg: &TrainConfig,
) -> Result<(ProgressHead, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = data[0].features.dim();
    for s in data {
        if s.features.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: s.features.dim(),
            });
        }
    }
    let mut head = ProgressHead::random_init(dim, cfg.seed);
    let mut curve = vec![mean_mse(&head, data)?];
    let mut indices: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, &[salt::SHUFFLE, epoch as u64]);
        indices.shuffle(&mut rng);
        for batch in indices.chunks(cfg.batch_size.max(1)) {
            let mut grad_w = vec![0.0; dim];
            let mut grad_b = 0.0;
            for &i in batch {
                let s = &data[i];
                let g = 2.0 * (progress_forward(&head, &s.features)? - s.label);
                grad_b += g;
                for (gw, &hv) in grad_w.iter_mut().zip(&s.features.values) {
                    *gw += g * hv;
                }
            }
            let scale = cfg.learning_rate / batch.len() as f64;
            for (w, g) in head.weights.iter_mut().zip(&grad_w) {
                *w -= scale * g + cfg.learning_rate * cfg.l2 * *w;
            }
            head.bias -= scale * grad_b;
        }
        curve.push(mean_mse(&head, data)?);
    }
    Ok((head, curve))
}

/// Expand complete traces into token-level `(h_k, k/L)` pairs via backend
/// replay. Incomplete traces are skipped; the skip count is returned.
pub fn build_progress_dataset<B: Backend>(
    traces: &[ReasoningTrace],
    backend: &B,
) -> Result<(Vec<ProgressSample>, usize)> {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for trace in traces {
        if trace.terminated_by != Termination::Answer {
            skipped += 1;
            continue;
        }
        let features = backend.replay_features(trace)?;
        let total = features.len() as f64;
        for (k, f) in features.into_iter().enumerate() {
            samples.push(ProgressSample {
                features: f,
                label: (k + 1) as f64 / total,
            });
        }
    }
    Ok((samples, skipped))
}

/// Exponential moving average with `smoothed[0] = raw[0]`.
pub fn exponential_smooth(raw: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(raw.len());
    for (i, &r) in raw.iter().enumerate() {
        if i == 0 {
            out.push(r);
        } else {
            out.push(alpha * r + (1.0 - alpha) * out[i - 1]);
        }
    }
    out
}

/// Per-token progress predictions for one complete trace.
#[derive(Debug, Clone)]
pub struct ProgressEval {
    /// Clamped to `[0, 1]` for reporting.
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// Mean absolute error of the smoothed series against `k/L`.
    pub mae: f64,
}

/// Replay a complete trace through the head, smooth the prediction series,
/// and score it against the true normalized positions.
pub fn evaluate_progress<B: Backend>(
    head: &ProgressHead,
    trace: &ReasoningTrace,
    backend: &B,
    smoothing: f64,
) -> Result<ProgressEval> {
    if trace.terminated_by != Termination::Answer {
        return Err(Error::Data(format!(
            "trace {} is incomplete",
            trace.query_id
        )));
    }
    let features = backend.replay_features(trace)?;
    let raw: Vec<f64> = features
        .iter()
        .map(|f| progress_forward(head, f).map(|p| p.clamp(0.0, 1.0)))
        .collect::<Result<_>>()?;
    Ok(evaluate_progress_series(&raw, smoothing))
}

/// Smooth an already-computed prediction series and score it against `k/L`.
pub fn evaluate_progress_series(raw: &[f64], smoothing: f64) -> ProgressEval {
    let smoothed = exponential_smooth(raw, smoothing);
    let n = raw.len() as f64;
    let mae = smoothed
        .iter()
        .enumerate()
        .map(|(k, &s)| (s - (k + 1) as f64 / n).abs())
        .sum::<f64>()
        / n;
    ProgressEval {
        raw: raw.to_vec(),
        smoothed,
        mae,
    }
}

/// Head checkpoint wire format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadCheckpoint {
    Potential {
        dim: usize,
        operator_set_name: String,
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
        train_seed: u64,
    },
    Progress {
        dim: usize,
        weights: Vec<f64>,
        bias: f64,
        train_seed: u64,
    },
}

impl HeadCheckpoint {
    pub fn from_potential(head: &PotentialHead, train_seed: u64) -> Self {
        Self::Potential {
            dim: head.dim(),
            operator_set_name: head.operator_set_name.clone(),
            weights: head.weights.clone(),
            bias: head.bias.clone(),
            train_seed,
        }
    }

    pub fn from_progress(head: &ProgressHead, train_seed: u64) -> Self {
        Self::Progress {
            dim: head.dim(),
            weights: head.weights.clone(),
            bias: head.bias,
            train_seed,
        }
    }

    pub fn into_potential(self) -> Result<(PotentialHead, u64)> {
        match self {
            Self::Potential {
                operator_set_name,
                weights,
                bias,
                train_seed,
                ..
            } => Ok((
                PotentialHead {
                    weights,
                    bias,
                    operator_set_name,
                },
                train_seed,
            )),
            Self::Progress { .. } => Err(Error::Data(
                "checkpoint kind is progress, expected potential".into(),
            )),
        }
    }

    pub fn into_progress(self) -> Result<(ProgressHead, u64)> {
        match self {
            Self::Progress {
                weights,
                bias,
                train_seed,
                ..
            } => Ok((ProgressHead { weights, bias }, train_seed)),
            Self::Potential { .. } => Err(Error::Data(
                "checkpoint kind is potential, expected progress".into(),
            )),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(r)?)
    }
}
