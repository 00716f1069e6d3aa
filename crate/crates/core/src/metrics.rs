//! Perplexity, key-token selection and key-token perplexity.
//!
//! A token is *key* when its log-probability gain from long context exceeds
//! `alpha` and its long-context log-probability exceeds `beta`, both strict.
//! LongPPL is the perplexity of the evaluated model over key tokens only,
//! each key token weighted equally; the soft variant weights every token by
//! `min(exp(LPG), gamma)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{ScoredDoc, TokenScoreRecord};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{0} is undefined on an empty token list")]
    Empty(&'static str),
    #[error("LongPPL is undefined: no key tokens selected (n_key_tokens = 0)")]
    NoKeyTokens,
    #[error("token {index}: {value} is not a finite log-probability")]
    BadLogprob { index: usize, value: f64 },
    #[error("length mismatch: {left} values vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("weights must be non-negative and finite with a positive sum")]
    BadWeights,
    #[error("invalid influence config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InfluenceConfig {
    /// LPG threshold, nats.
    #[serde(default = "InfluenceConfig::default_alpha")]
    pub alpha: f64,
    /// LPV threshold, nats.
    #[serde(default = "InfluenceConfig::default_beta")]
    pub beta: f64,
    /// Upper clamp on the soft influence ratio.
    #[serde(default = "InfluenceConfig::default_gamma")]
    pub gamma: f64,
}

impl InfluenceConfig {
    pub const DEFAULT_ALPHA: f64 = 2.0;
    pub const DEFAULT_BETA: f64 = -2.0;
    pub const DEFAULT_GAMMA: f64 = 5.0;

    fn default_alpha() -> f64 {
        Self::DEFAULT_ALPHA
    }

    fn default_beta() -> f64 {
        Self::DEFAULT_BETA
    }

    fn default_gamma() -> f64 {
        Self::DEFAULT_GAMMA
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.alpha.is_nan() || self.beta.is_nan() {
            return Err(MetricError::Config("thresholds must not be NaN".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(MetricError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        InfluenceConfig {
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
            gamma: Self::DEFAULT_GAMMA,
        }
    }
}

/// Per-token key flags with their normalized equal weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyTokenMask {
    flags: Vec<bool>,
    weights: Vec<f64>,
}

impl KeyTokenMask {
    pub fn from_flags(flags: Vec<bool>) -> Self {
        let n_key = flags.iter().filter(|&&f| f).count();
        let w = if n_key == 0 { 0.0 } else { 1.0 / n_key as f64 };
        let weights = flags.iter().map(|&f| if f { w } else { 0.0 }).collect();
        KeyTokenMask { flags, weights }
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn n_key(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn key_indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

fn check_logprobs(logps: &[f64]) -> Result<(), MetricError> {
    for (index, &value) in logps.iter().enumerate() {
        if !value.is_finite() || value > 0.0 {
            return Err(MetricError::BadLogprob { index, value });
        }
    }
    Ok(())
}

/// `exp(-mean(logp))`.
pub fn compute_ppl(logp_long: &[f64]) -> Result<f64, MetricError> {
    if logp_long.is_empty() {
        return Err(MetricError::Empty("PPL"));
    }
    check_logprobs(logp_long)?;
    let mean = logp_long.iter().sum::<f64>() / logp_long.len() as f64;
    Ok((-mean).exp())
}

pub fn compute_lpg(record: &TokenScoreRecord) -> f64 {
    record.logp_long - record.logp_short
}

pub fn compute_lpv(record: &TokenScoreRecord) -> f64 {
    record.logp_long
}

pub fn is_key(record: &TokenScoreRecord, cfg: &InfluenceConfig) -> bool {
    compute_lpg(record) > cfg.alpha && compute_lpv(record) > cfg.beta
}

pub fn select_key_tokens(scored: &ScoredDoc, cfg: &InfluenceConfig) -> KeyTokenMask {
    KeyTokenMask::from_flags(scored.records.iter().map(|r| is_key(r, cfg)).collect())
}

/// `exp(-Σ w_i logp_i / Σ w_i)`.
pub fn weighted_ppl(logps: &[f64], weights: &[f64]) -> Result<f64, MetricError> {
    if logps.len() != weights.len() {
        return Err(MetricError::LengthMismatch {
            left: logps.len(),
            right: weights.len(),
        });
    }
    if logps.is_empty() {
        return Err(MetricError::Empty("weighted PPL"));
    }
    check_logprobs(logps)?;
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(MetricError::BadWeights);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(MetricError::BadWeights);
    }
    let acc: f64 = logps.iter().zip(weights).map(|(l, w)| w * l).sum();
    Ok((-acc / total).exp())
}

/// Perplexity of the evaluated scores restricted to the mask's key tokens.
/// The mask must already be aligned with the evaluated tokenization.
pub fn compute_longppl(scored: &ScoredDoc, mask: &KeyTokenMask) -> Result<f64, MetricError> {
    compute_longppl_corpus(&[(scored, mask)])
}

/// Pools the key tokens of every document into one equally weighted mean.
pub fn compute_longppl_corpus(docs: &[(&ScoredDoc, &KeyTokenMask)]) -> Result<f64, MetricError> {
    let mut logps = Vec::new();
    for (scored, mask) in docs {
        if scored.len() != mask.len() {
            return Err(MetricError::LengthMismatch {
                left: scored.len(),
                right: mask.len(),
            });
        }
        logps.extend(
            scored
                .records
                .iter()
                .zip(mask.flags())
                .filter(|(_, &f)| f)
                .map(|(r, _)| r.logp_long),
        );
    }
    if logps.is_empty() {
        return Err(MetricError::NoKeyTokens);
    }
    compute_ppl(&logps)
}

pub fn compute_soft_influence(record: &TokenScoreRecord, cfg: &InfluenceConfig) -> f64 {
    compute_lpg(record).exp().min(cfg.gamma)
}

pub fn soft_weights(scored: &ScoredDoc, cfg: &InfluenceConfig) -> Vec<f64> {
    scored.records.iter().map(|r| compute_soft_influence(r, cfg)).collect()
}

pub fn compute_longppl_soft(scored: &ScoredDoc, cfg: &InfluenceConfig) -> Result<f64, MetricError> {
    weighted_ppl(&scored.logp_long(), &soft_weights(scored, cfg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ppl: f64,
    /// `None` when no token was selected.
    pub longppl: Option<f64>,
    pub longppl_soft: f64,
    pub n_tokens: usize,
    pub n_key_tokens: usize,
    pub key_fraction: f64,
}

/// Single-document report. `mask` selects key tokens for LongPPL; the soft
/// variant uses `scored`'s own LPG.
pub fn summarize(scored: &ScoredDoc, mask: &KeyTokenMask, cfg: &InfluenceConfig) -> Result<MetricReport, MetricError> {
    let soft = soft_weights(scored, cfg);
    summarize_corpus(&[(scored, mask, soft.as_slice())])
}

/// Corpus report with pooled tokens. Each entry is the evaluated scores,
/// the aligned key mask and the aligned soft weights.
pub fn summarize_corpus(docs: &[(&ScoredDoc, &KeyTokenMask, &[f64])]) -> Result<MetricReport, MetricError> {
    let mut logps = Vec::new();
    let mut soft = Vec::new();
    let mut n_key = 0;
    for (scored, mask, weights) in docs {
        if mask.len() != scored.len() || weights.len() != scored.len() {
            return Err(MetricError::LengthMismatch {
                left: scored.len(),
                right: mask.len().min(weights.len()),
            });
        }
        logps.extend(scored.records.iter().map(|r| r.logp_long));
        soft.extend_from_slice(weights);
        n_key += mask.n_key();
    }
    let ppl = compute_ppl(&logps)?;
    let pairs: Vec<_> = docs.iter().map(|(s, m, _)| (*s, *m)).collect();
    let longppl = match compute_longppl_corpus(&pairs) {
        Ok(v) => Some(v),
        Err(MetricError::NoKeyTokens) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        ppl,
        longppl,
        longppl_soft: weighted_ppl(&logps, &soft)?,
        n_tokens: logps.len(),
        n_key_tokens: n_key,
        key_fraction: n_key as f64 / logps.len() as f64,
    })
}
