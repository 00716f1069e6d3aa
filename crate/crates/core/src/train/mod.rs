//! Cross-entropy and the reweighted long-context loss, plus a small trainer.
//!
//! Under [`LossKind::LongCe`] each step scores every sequence twice with the
//! current model (full context, then the sliding short window), turns the
//! difference into clamped per-token weights, and takes one gradient step
//! with those weights held fixed.

mod model;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{score_short_ids, ScoreError, WindowConfig};

pub use model::{TinyLM, TinyLMConfig, MAX_CONTEXT, MAX_PARAMS, MAX_VOCAB};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("length mismatch: {0} long vs {1} short log-probabilities")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("loss diverged at step {step}: {value}")]
    Diverged { step: usize, value: f64 },
    #[error("scoring failed at step {step}: {source}")]
    Score { step: usize, source: ScoreError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "LongCE")]
    LongCe,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Sum,
    #[default]
    Mean,
}

/// `Sgd` uses `momentum`; `Adam` uses the usual 0.9 / 0.999 moment decay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongCeConfig {
    pub gamma: f64,
    pub normalization: Normalization,
}

impl Default for LongCeConfig {
    fn default() -> Self {
        LongCeConfig {
            gamma: 5.0,
            normalization: Normalization::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub nll: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_nll: Option<f64>,
}

impl LossBreakdown {
    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean NLL over the given token positions.
    pub fn with_answer(mut self, answer: &[usize]) -> Self {
        if !answer.is_empty() {
            self.answer_nll = Some(answer.iter().map(|&i| self.nll[i]).sum::<f64>() / answer.len() as f64);
        }
        self
    }
}

/// Mean negative log-probability.
pub fn compute_ce(logps: &[f64]) -> Result<f64, TrainError> {
    if logps.is_empty() {
        return Err(TrainError::Empty);
    }
    Ok(-logps.iter().sum::<f64>() / logps.len() as f64)
}

/// `min(exp(long - short), gamma)` per token.
pub fn longce_weights(logps_long: &[f64], logps_short: &[f64], gamma: f64) -> Result<Vec<f64>, TrainError> {
    if logps_long.len() != logps_short.len() {
        return Err(TrainError::LengthMismatch(logps_long.len(), logps_short.len()));
    }
    Ok(logps_long
        .iter()
        .zip(logps_short)
        .map(|(l, s)| (l - s).exp().min(gamma))
        .collect())
}

/// Loss from explicit weights: `-sum w_i logp_i`, divided by `n` under mean
/// normalization.
pub fn weighted_loss(logps: &[f64], weights: Vec<f64>, normalization: Normalization) -> Result<LossBreakdown, TrainError> {
    if logps.is_empty() {
        return Err(TrainError::Empty);
    }
    if logps.len() != weights.len() {
        return Err(TrainError::LengthMismatch(logps.len(), weights.len()));
    }
    let nll: Vec<f64> = logps.iter().map(|l| -l).collect();
    let total: f64 = nll.iter().zip(&weights).map(|(x, w)| w * x).sum();
    let loss = match normalization {
        Normalization::Sum => total,
        Normalization::Mean => total / nll.len() as f64,
    };
    Ok(LossBreakdown {
        loss,
        weights,
        nll,
        answer_nll: None,
    })
}

pub fn compute_longce(logps_long: &[f64], logps_short: &[f64], cfg: &LongCeConfig) -> Result<LossBreakdown, TrainError> {
    if !(cfg.gamma > 0.0) {
        return Err(TrainError::Config(format!("gamma must be positive, got {}", cfg.gamma)));
    }
    let weights = longce_weights(logps_long, logps_short, cfg.gamma)?;
    weighted_loss(logps_long, weights, cfg.normalization)
}

/// Gradient of `-sum_docs sum_t weights[d][t] * logp_t` for a batch.
/// Weights are constants. Returns the gradient and per-doc log-probabilities.
pub fn tiny_lm_gradients(
    model: &TinyLM,
    batch: &[Vec<u32>],
    weights: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>), ScoreError> {
    if batch.len() != weights.len() {
        return Err(ScoreError::Config(format!("{} sequences, {} weight rows", batch.len(), weights.len())));
    }
    let mut grad = vec![0.0; model.params().len()];
    let logps = batch
        .iter()
        .zip(weights)
        .map(|(ids, w)| model.accumulate_gradients(ids, w, &mut grad))
        .collect::<Result<_, _>>()?;
    Ok((grad, logps))
}

/// A training sequence with optional answer positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainDoc {
    pub ids: Vec<u32>,
    #[serde(default)]
    pub answer: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Defaults to one eighth of the context window.
    #[serde(default)]
    pub k_short: Option<usize>,
    /// Defaults to a quarter of `k_short`.
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default = "TrainConfig::default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub normalization: Normalization,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// When set, the learning rate falls linearly to zero over the run.
    #[serde(default)]
    pub linear_decay: bool,
    /// Decay of an exponential moving average of the parameters. The
    /// trained model receives the average instead of the last iterate.
    #[serde(default)]
    pub param_ema: Option<f64>,
    /// Seed for batch sampling.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn default_gamma() -> f64 {
        5.0
    }

    pub fn new(loss_kind: LossKind, learning_rate: f64, steps: usize, batch_size: usize) -> Self {
        TrainConfig {
            loss_kind,
            learning_rate,
            optimizer: Optimizer::Sgd,
            momentum: 0.0,
            steps,
            batch_size,
            k_short: None,
            d: None,
            gamma: Self::default_gamma(),
            normalization: Normalization::Mean,
            grad_clip: None,
            linear_decay: false,
            param_ema: None,
            seed: 0,
        }
    }

    /// Short-context window for a model with the given context length.
    pub fn window(&self, context_window: usize) -> Result<WindowConfig, TrainError> {
        let k = self.k_short.unwrap_or((context_window / 8).max(1));
        let d = self.d.unwrap_or((k / 4).max(1));
        if k >= context_window {
            return Err(TrainError::Config(format!("k_short {k} must be below the context window {context_window}")));
        }
        WindowConfig::new(k, d).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn validate(&self, context_window: usize) -> Result<(), TrainError> {
        self.window(context_window)?;
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("need learning_rate > 0 and 0 <= momentum < 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(TrainError::Config("gamma must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        if self.param_ema.is_some_and(|a| !(0.0..1.0).contains(&a)) {
            return Err(TrainError::Config("param_ema must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub mean_weight: f64,
    pub max_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_nll: Option<f64>,
}

pub fn write_train_log<W: Write>(mut out: W, log: &[StepLog]) -> std::io::Result<()> {
    for row in log {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Loss breakdown for one batch under the current parameters.
pub fn batch_breakdown(
    model: &TinyLM,
    docs: &[&TrainDoc],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>), ScoreError> {
    let window = cfg
        .window(model.config().context_window)
        .map_err(|e| ScoreError::Config(e.to_string()))?;
    let mut long: Vec<f64> = Vec::new();
    let mut short: Vec<f64> = Vec::new();
    let mut answer = Vec::new();
    for doc in docs {
        let lp = model.forward_logps(&doc.ids)?;
        if cfg.loss_kind == LossKind::LongCe {
            short.extend(score_short_ids(&doc.ids, model, &window, Some(&lp))?.into_iter().map(|(s, _)| s));
        }
        answer.extend(doc.answer.iter().map(|&i| long.len() + i));
        long.extend(lp);
    }
    let weights = match cfg.loss_kind {
        LossKind::Ce => vec![1.0; long.len()],
        LossKind::LongCe => longce_weights(&long, &short, cfg.gamma).map_err(|e| ScoreError::Config(e.to_string()))?,
    };
    let breakdown = weighted_loss(&long, weights, cfg.normalization)
        .map_err(|e| ScoreError::Config(e.to_string()))?
        .with_answer(&answer);
    let denom = match cfg.normalization {
        Normalization::Sum => 1.0,
        Normalization::Mean => long.len() as f64,
    };
    let mut coef = Vec::with_capacity(docs.len());
    let mut at = 0;
    for doc in docs {
        coef.push(breakdown.weights[at..at + doc.ids.len()].iter().map(|w| w / denom).collect());
        at += doc.ids.len();
    }
    Ok((breakdown, coef))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains in place. The batch order depends only on `cfg.seed`, so CE and
/// LongCE runs with the same seed see the same data.
pub fn train(model: &mut TinyLM, corpus: &[TrainDoc], cfg: &TrainConfig) -> Result<Vec<StepLog>, TrainError> {
    cfg.validate(model.config().context_window)?;
    if corpus.is_empty() || corpus.iter().any(|d| d.ids.is_empty()) {
        return Err(TrainError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; model.params().len()];
    let mut average = cfg.param_ema.map(|_| model.params().to_vec());
    let mut second = match cfg.optimizer {
        Optimizer::Adam => vec![0.0; velocity.len()],
        Optimizer::Sgd => Vec::new(),
    };
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&TrainDoc> = (0..cfg.batch_size)
            .map(|_| &corpus[rng.random_range(0..corpus.len())])
            .collect();
        let (breakdown, coef) = batch_breakdown(model, &batch, cfg).map_err(|source| TrainError::Score { step, source })?;
        if !breakdown.loss.is_finite() {
            return Err(TrainError::Diverged { step, value: breakdown.loss });
        }
        let mut grad = vec![0.0; velocity.len()];
        for (doc, c) in batch.iter().zip(&coef) {
            model
                .accumulate_gradients(&doc.ids, c, &mut grad)
                .map_err(|source| TrainError::Score { step, source })?;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Diverged { step, value: norm });
        }
        let shrink = match cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = if cfg.linear_decay {
            cfg.learning_rate * (cfg.steps - step) as f64 / cfg.steps as f64
        } else {
            cfg.learning_rate
        };
        match cfg.optimizer {
            Optimizer::Sgd => {
                for ((p, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = cfg.momentum * *v + shrink * g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam => {
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
                let params = model.params_mut().iter_mut().zip(&mut velocity).zip(&mut second).zip(&grad);
                for (((p, m), s), g) in params {
                    let g = shrink * g;
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        if let (Some(avg), Some(a)) = (&mut average, cfg.param_ema) {
            for (m, p) in avg.iter_mut().zip(model.params()) {
                *m = a * *m + (1.0 - a) * p;
            }
        }
        log.push(StepLog {
            step,
            loss: breakdown.loss,
            mean_weight: breakdown.mean_weight(),
            max_weight: breakdown.max_weight(),
            answer_nll: breakdown.answer_nll,
        });
    }
    if let Some(avg) = average {
        model.params_mut().copy_from_slice(&avg);
    }
    Ok(log)
}

/// Mean full-context NLL over all answer tokens of the given documents.
pub fn answer_nll(model: &TinyLM, docs: &[TrainDoc]) -> Result<f64, ScoreError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in docs {
        let lp = model.forward_logps(&doc.ids)?;
        for &i in &doc.answer {
            total -= lp[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(ScoreError::Config("no answer tokens".into()));
    }
    Ok(total / count as f64)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TinyLMConfig,
    seed: u64,
    format_version: u32,
}

/// Layout: u64 little-endian header length, JSON header, then the
/// parameters as f64 little-endian.
pub fn save_checkpoint(model: &TinyLM, path: &Path) -> Result<(), TrainError> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: model.config().clone(),
        seed: model.config().seed,
        format_version: CHECKPOINT_FORMAT,
    })
    .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for p in model.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TinyLM, TrainError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(TrainError::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut header = vec![0u8; len as usize];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_FORMAT {
        return Err(TrainError::Checkpoint(format!("unsupported format_version {}", header.format_version)));
    }
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(TrainError::Checkpoint("parameter block is not a whole number of f64".into()));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    TinyLM::from_parts(header.config, params).map_err(TrainError::Checkpoint)
}
