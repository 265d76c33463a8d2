//! Linear adapter over frozen embeddings, trained with a triplet margin loss
//! and then a grade-weighted cosine pair loss.
//!
//! Gradients are derived by hand. For `y = u / |u|` with `u = W v` the
//! backward pass is `dL/du = (dL/dy - y (y . dL/dy)) / |u|` and
//! `dL/dW += dL/du v^T`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingError, EmbeddingMatrix};
use crate::qepair::QePair;
use crate::triplet::LabeledTriplet;

const MAGIC: &[u8; 4] = b"LMAD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("validation loss diverged at epoch {epoch}: {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown paragraph {0}")]
    UnknownParagraph(usize),
    #[error("no embedding for question {0:?}")]
    MissingQuestion(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {reason}")]
    Malformed { path: String, reason: String },
}

impl From<EmbeddingError> for TrainError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimMismatch { expected, actual } => {
                TrainError::DimMismatch { expected, actual }
            }
            _ => TrainError::ZeroVector,
        }
    }
}

fn check_dim(expected: usize, v: &[f64]) -> Result<(), TrainError> {
    if v.len() != expected {
        return Err(TrainError::DimMismatch {
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adapter
// ---------------------------------------------------------------------------

/// `d_out x d_in` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub d_in: usize,
    pub d_out: usize,
    pub w: Vec<f64>,
}

impl AdapterParams {
    pub fn identity(d: usize) -> Self {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Self { d_in: d, d_out: d, w }
    }

    /// Identity plus seeded Gaussian noise with standard deviation `std`.
    pub fn init(d: usize, std: f64, rng_seed: u64) -> Self {
        let mut p = Self::identity(d);
        if std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let normal = Normal::new(0.0, std).expect("finite std");
            for x in p.w.iter_mut() {
                *x += normal.sample(&mut rng);
            }
        }
        p
    }

    pub fn from_matrix(d_out: usize, d_in: usize, w: Vec<f64>) -> Result<Self, TrainError> {
        if w.len() != d_out * d_in {
            return Err(TrainError::DimMismatch {
                expected: d_out * d_in,
                actual: w.len(),
            });
        }
        Ok(Self { d_in, d_out, w })
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.w.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|x| x.is_finite())
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.w[j * self.d_in..(j + 1) * self.d_in]
    }

    /// `W v` without normalization.
    pub fn linear(&self, v: &[f64]) -> Result<Vec<f64>, TrainError> {
        check_dim(self.d_in, v)?;
        Ok((0..self.d_out).map(|j| dot(self.row(j), v)).collect())
    }

    /// `normalize(W v)`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>, TrainError> {
        Ok(forward(self, v)?.y)
    }

    /// Adapts every row of `index`, keeping row ids.
    pub fn apply_matrix(&self, index: &EmbeddingMatrix) -> Result<EmbeddingMatrix, TrainError> {
        if index.d() != self.d_in {
            return Err(TrainError::DimMismatch {
                expected: self.d_in,
                actual: index.d(),
            });
        }
        Ok(index.map_rows(|v| self.linear(v).expect("checked dim"))?)
    }

    pub fn save(&self, path: &Path, trailer: &serde_json::Value) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::with_capacity(16 + self.w.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d_out as u32).to_le_bytes());
        for x in &self.w {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(trailer.to_string().as_bytes());
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|reason| TrainError::Malformed {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value), String> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(format!("unsupported version {}", u32_at(4)));
        }
        let (d_in, d_out) = (u32_at(8) as usize, u32_at(12) as usize);
        let end = 16 + d_in * d_out * 8;
        if bytes.len() < end {
            return Err("truncated matrix".into());
        }
        let w: Vec<f64> = bytes[16..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let trailer = if bytes.len() == end {
            serde_json::Value::Null
        } else {
            serde_json::from_slice(&bytes[end..]).map_err(|e| format!("trailer: {e}"))?
        };
        let p = Self { d_in, d_out, w };
        if !p.is_finite() {
            return Err("non-finite weights".into());
        }
        Ok((p, trailer))
    }
}

struct Forward {
    norm: f64,
    y: Vec<f64>,
}

fn forward(params: &AdapterParams, v: &[f64]) -> Result<Forward, TrainError> {
    let u = params.linear(v)?;
    let norm = dot(&u, &u).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(TrainError::ZeroVector);
    }
    let y = u.iter().map(|x| x / norm).collect();
    Ok(Forward { norm, y })
}

/// Pulls `dy` back through `y = u / |u|` and accumulates `scale * du v^T`.
fn backward(grad: &mut [f64], f: &Forward, v: &[f64], dy: &[f64], scale: f64) {
    let proj = dot(&f.y, dy);
    let d_in = v.len();
    for (j, (dyj, yj)) in dy.iter().zip(&f.y).enumerate() {
        let du = scale * (dyj - yj * proj) / f.norm;
        if du != 0.0 {
            let row = &mut grad[j * d_in..(j + 1) * d_in];
            for (g, x) in row.iter_mut().zip(v) {
                *g += du * x;
            }
        }
    }
}

fn p_norm(x: &[f64], p: u32) -> f64 {
    match p {
        1 => x.iter().map(|v| v.abs()).sum(),
        2 => dot(x, x).sqrt(),
        _ => x.iter().map(|v| v.abs().powi(p as i32)).sum::<f64>().powf(1.0 / p as f64),
    }
}

/// Gradient of `|x|_p` with respect to `x`; zero at the origin.
fn p_norm_grad(x: &[f64], p: u32, norm: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; x.len()];
    }
    match p {
        1 => x.iter().map(|v| v.signum() * (*v != 0.0) as u8 as f64).collect(),
        2 => x.iter().map(|v| v / norm).collect(),
        _ => {
            let denom = norm.powi(p as i32 - 1);
            x.iter()
                .map(|v| v.signum() * v.abs().powi(p as i32 - 1) / denom)
                .collect()
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// `max(|a - p|_q - |a - n|_q + margin, 0)` on the vectors as given.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64, norm_p: u32) -> Result<f64, TrainError> {
    check_dim(a.len(), p)?;
    check_dim(a.len(), n)?;
    let dap: Vec<f64> = a.iter().zip(p).map(|(x, y)| x - y).collect();
    let dan: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    Ok((p_norm(&dap, norm_p) - p_norm(&dan, norm_p) + margin).max(0.0))
}

/// Triplet loss on adapted vectors and its gradient with respect to `W`,
/// accumulated into `grad` after scaling by `scale`. Returns the loss.
pub fn triplet_loss_grad_into(
    params: &AdapterParams,
    a: &[f64],
    p: &[f64],
    n: &[f64],
    margin: f64,
    norm_p: u32,
    grad: &mut [f64],
    scale: f64,
) -> Result<f64, TrainError> {
    let (fa, fp, fn_) = (forward(params, a)?, forward(params, p)?, forward(params, n)?);
    let dap: Vec<f64> = fa.y.iter().zip(&fp.y).map(|(x, y)| x - y).collect();
    let dan: Vec<f64> = fa.y.iter().zip(&fn_.y).map(|(x, y)| x - y).collect();
    let (d1, d2) = (p_norm(&dap, norm_p), p_norm(&dan, norm_p));
    let loss = d1 - d2 + margin;
    if loss <= 0.0 {
        return Ok(0.0);
    }
    let g1 = p_norm_grad(&dap, norm_p, d1);
    let g2 = p_norm_grad(&dan, norm_p, d2);
    let dya: Vec<f64> = g1.iter().zip(&g2).map(|(x, y)| x - y).collect();
    let dyp: Vec<f64> = g1.iter().map(|x| -x).collect();
    backward(grad, &fa, a, &dya, scale);
    backward(grad, &fp, p, &dyp, scale);
    backward(grad, &fn_, n, &g2, scale);
    Ok(loss)
}

pub fn triplet_loss_grad(
    params: &AdapterParams,
    a: &[f64],
    p: &[f64],
    n: &[f64],
    margin: f64,
    norm_p: u32,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut g = params.zeros_like();
    let loss = triplet_loss_grad_into(params, a, p, n, margin, norm_p, &mut g, 1.0)?;
    Ok((loss, g))
}

/// `s (1 - cos)` for `y = +1`, `max(0, cos - margin)` for `y = -1`.
pub fn cosine_pair_loss(q: &[f64], e: &[f64], y: f64, s: f64, margin: f64) -> Result<f64, TrainError> {
    let cos = crate::embedding::cosine_similarity(q, e)?;
    Ok(pair_loss_from_cos(cos, y, s, margin))
}

fn pair_loss_from_cos(cos: f64, y: f64, s: f64, margin: f64) -> f64 {
    if y > 0.0 {
        s * (1.0 - cos)
    } else {
        (cos - margin).max(0.0)
    }
}

/// Adapted evidence-set vector: mean of the adapted members, normalized.
pub fn evidence_embedding(params: &AdapterParams, members: &[&[f64]]) -> Result<Vec<f64>, TrainError> {
    let adapted: Vec<Vec<f64>> = members.iter().map(|v| params.apply(v)).collect::<Result<_, _>>()?;
    let refs: Vec<&[f64]> = adapted.iter().map(|v| v.as_slice()).collect();
    Ok(crate::embedding::mean_normalized(&refs)?)
}

pub fn cosine_pair_loss_grad_into(
    params: &AdapterParams,
    q: &[f64],
    evidence: &[&[f64]],
    y: f64,
    s: f64,
    margin: f64,
    grad: &mut [f64],
    scale: f64,
) -> Result<f64, TrainError> {
    if evidence.is_empty() {
        return Err(TrainError::EmptyDataset("evidence set".into()));
    }
    let fq = forward(params, q)?;
    let fs: Vec<Forward> = evidence.iter().map(|v| forward(params, v)).collect::<Result<_, _>>()?;
    let k = fs.len() as f64;
    let mut m = vec![0.0; params.d_out];
    for f in &fs {
        for (a, x) in m.iter_mut().zip(&f.y) {
            *a += x / k;
        }
    }
    let m_norm = dot(&m, &m).sqrt();
    if m_norm == 0.0 {
        return Err(TrainError::ZeroVector);
    }
    let e: Vec<f64> = m.iter().map(|x| x / m_norm).collect();
    let cos = dot(&fq.y, &e);
    let loss = pair_loss_from_cos(cos, y, s, margin);
    let dcos = if y > 0.0 {
        -s
    } else if cos > margin {
        1.0
    } else {
        0.0
    };
    if dcos == 0.0 {
        return Ok(loss);
    }
    let dyq: Vec<f64> = e.iter().map(|x| dcos * x).collect();
    backward(grad, &fq, q, &dyq, scale);
    // Through e = m / |m|, then m = mean(y_i).
    let de: Vec<f64> = fq.y.iter().map(|x| dcos * x).collect();
    let proj = dot(&e, &de);
    let dyi: Vec<f64> = de
        .iter()
        .zip(&e)
        .map(|(d, ej)| (d - ej * proj) / (m_norm * k))
        .collect();
    for (f, v) in fs.iter().zip(evidence) {
        backward(grad, f, v, &dyi, scale);
    }
    Ok(loss)
}

pub fn cosine_pair_loss_grad(
    params: &AdapterParams,
    q: &[f64],
    evidence: &[&[f64]],
    y: f64,
    s: f64,
    margin: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut g = params.zeros_like();
    let loss = cosine_pair_loss_grad_into(params, q, evidence, y, s, margin, &mut g, 1.0)?;
    Ok((loss, g))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            w[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Triplet,
    Qe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub triplet_lr: f64,
    pub qe_lr: f64,
    pub batch_size: usize,
    pub triplet_margin: f64,
    pub cosine_margin: f64,
    pub norm_p: u32,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub init_noise_std: f64,
    /// Share of labeled triplets held out for validation.
    pub triplet_val_fraction: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            triplet_lr: 1e-5,
            qe_lr: 1e-6,
            batch_size: 32,
            triplet_margin: 1.0,
            cosine_margin: 0.0,
            norm_p: 2,
            weight_decay: 0.01,
            max_epochs: 30,
            patience: 3,
            init_noise_std: 1e-3,
            triplet_val_fraction: 0.3,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.triplet_lr > 0.0 && self.qe_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.norm_p == 0 {
            return bad("norm_p must be >= 1");
        }
        if !(self.weight_decay >= 0.0 && self.init_noise_std >= 0.0) {
            return bad("weight_decay and init_noise_std must be >= 0");
        }
        if !(self.triplet_val_fraction > 0.0 && self.triplet_val_fraction < 1.0) {
            return bad("triplet_val_fraction must be in (0, 1)");
        }
        Ok(())
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Triplet => self.triplet_lr,
            Stage::Qe => self.qe_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Triplet {
        anchor: Vec<f64>,
        positive: Vec<f64>,
        negative: Vec<f64>,
    },
    Pair {
        question: Vec<f64>,
        evidence: Vec<Vec<f64>>,
        /// +1 or -1.
        label: f64,
        grade: f64,
    },
}

impl Sample {
    /// Adds `scale * dL/dW` into `grad` when given, and returns the loss.
    pub fn loss(
        &self,
        params: &AdapterParams,
        config: &TrainConfig,
        grad: Option<(&mut [f64], f64)>,
    ) -> Result<f64, TrainError> {
        match self {
            Sample::Triplet {
                anchor,
                positive,
                negative,
            } => {
                let Some((g, scale)) = grad else {
                    let a = params.apply(anchor)?;
                    let p = params.apply(positive)?;
                    let n = params.apply(negative)?;
                    return triplet_loss(&a, &p, &n, config.triplet_margin, config.norm_p);
                };
                triplet_loss_grad_into(
                    params,
                    anchor,
                    positive,
                    negative,
                    config.triplet_margin,
                    config.norm_p,
                    g,
                    scale,
                )
            }
            Sample::Pair {
                question,
                evidence,
                label,
                grade,
            } => {
                let refs: Vec<&[f64]> = evidence.iter().map(|v| v.as_slice()).collect();
                let Some((g, scale)) = grad else {
                    let q = params.apply(question)?;
                    let e = evidence_embedding(params, &refs)?;
                    return Ok(pair_loss_from_cos(dot(&q, &e), *label, *grade, config.cosine_margin));
                };
                cosine_pair_loss_grad_into(
                    params,
                    question,
                    &refs,
                    *label,
                    *grade,
                    config.cosine_margin,
                    g,
                    scale,
                )
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Splits `n` items into shuffled train and val index lists.
/// `round(fraction * n)` go to val, clamped to `[1, n - 1]`.
pub fn holdout_split(n: usize, fraction: f64, rng_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (order, Vec::new());
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut val = order.split_off(n - n_val);
    order.sort_unstable();
    val.sort_unstable();
    (order, val)
}

fn vector(index: &EmbeddingMatrix, id: usize) -> Result<Vec<f64>, TrainError> {
    index
        .vector(id)
        .map(|v| v.to_vec())
        .ok_or(TrainError::UnknownParagraph(id))
}

/// Triplet samples from labeled triplets, with a seeded holdout.
pub fn triplet_dataset(
    index: &EmbeddingMatrix,
    triplets: &[LabeledTriplet],
    val_fraction: f64,
    rng_seed: u64,
) -> Result<Dataset, TrainError> {
    let sample = |t: &LabeledTriplet| -> Result<Sample, TrainError> {
        Ok(Sample::Triplet {
            anchor: vector(index, t.anchor_id)?,
            positive: vector(index, t.positive_id)?,
            negative: vector(index, t.negative_id)?,
        })
    };
    let (train, val) = holdout_split(triplets.len(), val_fraction, rng_seed);
    Ok(Dataset {
        train: train.iter().map(|&i| sample(&triplets[i])).collect::<Result<_, _>>()?,
        val: val.iter().map(|&i| sample(&triplets[i])).collect::<Result<_, _>>()?,
    })
}

/// Pair samples; each pair goes to the side named by its `split`
/// (unsplit pairs train).
pub fn qe_dataset(
    index: &EmbeddingMatrix,
    questions: &HashMap<String, Vec<f64>>,
    pairs: &[QePair],
) -> Result<Dataset, TrainError> {
    let mut ds = Dataset::default();
    for p in pairs {
        let question = questions
            .get(&p.question)
            .cloned()
            .ok_or_else(|| TrainError::MissingQuestion(p.question.clone()))?;
        let evidence = p
            .evidence_ids
            .iter()
            .map(|&id| vector(index, id))
            .collect::<Result<_, _>>()?;
        let s = Sample::Pair {
            question,
            evidence,
            label: p.label(),
            grade: p.grade,
        };
        match p.split {
            Some(crate::qepair::Split::Val) => ds.val.push(s),
            _ => ds.train.push(s),
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    /// Mean training loss per epoch, starting at epoch 1.
    pub train_losses: Vec<f64>,
    /// Validation loss per epoch; index 0 is before any update.
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    pub n_train: usize,
    pub n_val: usize,
}

pub fn mean_loss(samples: &[Sample], params: &AdapterParams, config: &TrainConfig) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        total += s.loss(params, config, None)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Mini-batch AdamW with early stopping on validation loss. Returns the
/// parameters of the best validation epoch (epoch 0 being `params`).
pub fn train_stage(
    stage: Stage,
    dataset: &Dataset,
    config: &TrainConfig,
    params: &AdapterParams,
) -> Result<(AdapterParams, TrainReport), TrainError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::EmptyDataset("no training samples".into()));
    }
    if dataset.val.is_empty() {
        return Err(TrainError::EmptyDataset("no validation samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut current = params.clone();
    let mut opt = AdamW::new(current.w.len(), config.lr(stage), config.weight_decay);
    let mut grad = current.zeros_like();

    let initial = mean_loss(&dataset.val, &current, config)?;
    if !initial.is_finite() {
        return Err(TrainError::DivergenceDetected { epoch: 0, loss: initial });
    }
    let mut report = TrainReport {
        stage,
        train_losses: Vec::new(),
        val_losses: vec![initial],
        best_epoch: 0,
        stop_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
        n_train: dataset.train.len(),
        n_val: dataset.val.len(),
    };
    let mut best = (initial, current.clone());
    let mut stale = 0;
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                epoch_loss += dataset.train[i].loss(&current, config, Some((&mut grad, scale)))?;
            }
            opt.step(&mut current.w, &grad);
            if !current.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch, loss: f64::NAN });
            }
        }
        report.train_losses.push(epoch_loss / dataset.train.len() as f64);
        let val = mean_loss(&dataset.val, &current, config);
        let val = match val {
            Ok(v) if v.is_finite() && current.is_finite() => v,
            Ok(v) => return Err(TrainError::DivergenceDetected { epoch, loss: v }),
            Err(TrainError::ZeroVector) => {
                return Err(TrainError::DivergenceDetected { epoch, loss: f64::NAN })
            }
            Err(e) => return Err(e),
        };
        report.val_losses.push(val);
        report.stop_epoch = epoch;
        log::debug!("{stage:?} epoch {epoch}: train {:.6} val {val:.6}", report.train_losses[epoch - 1]);
        if val < best.0 {
            best = (val, current.clone());
            report.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                report.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    log::info!(
        "{stage:?}: stopped at epoch {} ({:?}), best epoch {} val {:.6}",
        report.stop_epoch,
        report.stop_reason,
        report.best_epoch,
        best.0
    );
    Ok((best.1, report))
}
