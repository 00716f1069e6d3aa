//! Per-token log-probabilities under long (full prefix) and short
//! (truncated) context.
//!
//! Short-context scores follow a block schedule: tokens are grouped into
//! blocks of `d` starting at multiples of `d`, and every token in the block
//! starting at `b` is scored with context beginning at `max(0, b - K)`. A
//! token therefore sees between `K` and `K + d - 1` preceding tokens once
//! truncation is possible, and one batched scorer call covers a whole block.

mod dump;
mod ngram;
mod remote;

pub use dump::{read_dump, read_dump_rows, write_dump, write_dump_rows, DumpError, DumpRow, TokenDiagnostics};
pub use ngram::{ngram_lm_train, NgramModel};
pub use remote::{RemoteConfig, RemoteScorer, API_KEY_ENV};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenize::{Span, TokenizedDoc};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("document has no tokens")]
    EmptyDoc,
    #[error("invalid window: {0}")]
    Window(String),
    #[error("token id {0} is outside the scorer vocabulary")]
    OutOfVocab(u32),
    #[error("scorer returned {0}, which is not a finite log-probability")]
    BadValue(f64),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("scorer configuration: {0}")]
    Config(String),
    #[error("scoring token {token_index}: {source}")]
    AtToken {
        token_index: usize,
        #[source]
        source: Box<ScoreError>,
    },
}

impl ScoreError {
    fn at(self, token_index: usize) -> Self {
        match self {
            ScoreError::AtToken { .. } => self,
            other => ScoreError::AtToken {
                token_index,
                source: Box::new(other),
            },
        }
    }

    /// Index of the token that failed, when known.
    pub fn token_index(&self) -> Option<usize> {
        match self {
            ScoreError::AtToken { token_index, .. } => Some(*token_index),
            _ => None,
        }
    }
}

/// A conditional next-token model returning natural-log probabilities.
///
/// Implementations must be deterministic and return finite values `<= 0`.
pub trait Scorer: Send + Sync {
    /// `log P(target | context)`. An empty context asks for the
    /// unconditional probability of a first token.
    fn logprob(&self, context: &[u32], target: u32) -> Result<f64, ScoreError>;

    /// Log-probability of `tokens[i]` given `tokens[..i]` for every
    /// `i in from..tokens.len()`. Backends that can score a sequence in one
    /// pass override this.
    fn score_suffix(&self, tokens: &[u32], from: usize) -> Result<Vec<f64>, ScoreError> {
        (from..tokens.len())
            .map(|i| self.logprob(&tokens[..i], tokens[i]).map_err(|e| e.at(i)))
            .collect()
    }

    fn vocab_size(&self) -> Option<usize> {
        None
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn logprob(&self, context: &[u32], target: u32) -> Result<f64, ScoreError> {
        (**self).logprob(context, target)
    }

    fn score_suffix(&self, tokens: &[u32], from: usize) -> Result<Vec<f64>, ScoreError> {
        (**self).score_suffix(tokens, from)
    }

    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn logprob(&self, context: &[u32], target: u32) -> Result<f64, ScoreError> {
        (**self).logprob(context, target)
    }

    fn score_suffix(&self, tokens: &[u32], from: usize) -> Result<Vec<f64>, ScoreError> {
        (**self).score_suffix(tokens, from)
    }

    fn vocab_size(&self) -> Option<usize> {
        (**self).vocab_size()
    }
}

/// Same probability `1/V` for every token regardless of context.
#[derive(Clone, Copy, Debug)]
pub struct UniformScorer {
    pub vocab_size: usize,
}

impl Scorer for UniformScorer {
    fn logprob(&self, _context: &[u32], target: u32) -> Result<f64, ScoreError> {
        if target as usize >= self.vocab_size {
            return Err(ScoreError::OutOfVocab(target));
        }
        Ok(-(self.vocab_size as f64).ln())
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.vocab_size)
    }
}

/// Short-context truncation length `k` and block step `d`, in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(default = "WindowConfig::default_k")]
    pub k: usize,
    #[serde(default = "WindowConfig::default_d")]
    pub d: usize,
}

impl WindowConfig {
    pub const DEFAULT_K: usize = 4096;
    pub const DEFAULT_D: usize = 1024;

    pub fn new(k: usize, d: usize) -> Result<Self, ScoreError> {
        let cfg = WindowConfig { k, d };
        cfg.validate()?;
        Ok(cfg)
    }

    fn default_k() -> usize {
        Self::DEFAULT_K
    }

    fn default_d() -> usize {
        Self::DEFAULT_D
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.d == 0 || self.d > self.k {
            return Err(ScoreError::Window(format!(
                "need 1 <= d <= k, got k={} d={}",
                self.k, self.d
            )));
        }
        Ok(())
    }

    /// Start of the short context used for token `index`.
    pub fn context_start(&self, index: usize) -> usize {
        let block_start = index - index % self.d;
        block_start.saturating_sub(self.k)
    }

    /// Number of tokens in the short context of token `index`.
    pub fn short_ctx_len(&self, index: usize) -> usize {
        index - self.context_start(index)
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            k: Self::DEFAULT_K,
            d: Self::DEFAULT_D,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreRecord {
    pub token_index: usize,
    pub token_text: String,
    pub span: Span,
    /// `log P(x_i | x_<i)` in nats.
    pub logp_long: f64,
    /// `log P(x_i | s_i)` in nats, `s_i` the truncated context.
    pub logp_short: f64,
    pub short_ctx_len: usize,
}

impl TokenScoreRecord {
    pub fn lpg(&self) -> f64 {
        self.logp_long - self.logp_short
    }

    pub fn lpv(&self) -> f64 {
        self.logp_long
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub records: Vec<TokenScoreRecord>,
}

impl ScoredDoc {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn logp_long(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.logp_long).collect()
    }

    pub fn spans(&self) -> Vec<Span> {
        self.records.iter().map(|r| r.span).collect()
    }

    /// Source text reconstructed from the token texts.
    pub fn source_text(&self) -> String {
        self.records.iter().map(|r| r.token_text.as_str()).collect()
    }

    /// Checks the record invariants: contiguous indices, probability bounds,
    /// short context never longer than the prefix, and spans tiling the text.
    pub fn validate(&self) -> Result<(), String> {
        for (i, r) in self.records.iter().enumerate() {
            if r.token_index != i {
                return Err(format!("record {i} has token_index {}", r.token_index));
            }
            for (name, v) in [("logp_long", r.logp_long), ("logp_short", r.logp_short)] {
                if !v.is_finite() || v > 0.0 {
                    return Err(format!("token {i}: {name} = {v} is not a log-probability"));
                }
            }
            if r.short_ctx_len > i {
                return Err(format!(
                    "token {i}: short_ctx_len {} exceeds the prefix length",
                    r.short_ctx_len
                ));
            }
        }
        let text = self.source_text();
        crate::tokenize::validate_tiling(
            &text,
            self.records.iter().map(|r| (r.span, r.token_text.as_str())),
        )
        .map_err(|e| e.to_string())
    }
}

fn check_value(v: f64, index: usize) -> Result<f64, ScoreError> {
    if v.is_finite() && v <= 0.0 {
        Ok(v)
    } else {
        Err(ScoreError::BadValue(v).at(index))
    }
}

/// `log P(x_i | x_<i)` for every position, in one batched call.
pub fn score_long_ids<S: Scorer + ?Sized>(ids: &[u32], scorer: &S) -> Result<Vec<f64>, ScoreError> {
    if ids.is_empty() {
        return Err(ScoreError::EmptyDoc);
    }
    let values = scorer.score_suffix(ids, 0)?;
    if values.len() != ids.len() {
        return Err(ScoreError::Protocol(format!(
            "scorer returned {} values for {} tokens",
            values.len(),
            ids.len()
        )));
    }
    values.into_iter().enumerate().map(|(i, v)| check_value(v, i)).collect()
}

/// Short-context scores under the block schedule. When `long` is given,
/// blocks whose context would be the full prefix reuse those values instead
/// of querying the scorer again.
pub fn score_short_ids<S: Scorer + ?Sized>(
    ids: &[u32],
    scorer: &S,
    cfg: &WindowConfig,
    long: Option<&[f64]>,
) -> Result<Vec<(f64, usize)>, ScoreError> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(ScoreError::EmptyDoc);
    }
    let mut out = Vec::with_capacity(ids.len());
    for block_start in (0..ids.len()).step_by(cfg.d) {
        let block_end = (block_start + cfg.d).min(ids.len());
        let ctx_start = cfg.context_start(block_start);
        let values = match long {
            Some(long) if ctx_start == 0 => long[block_start..block_end].to_vec(),
            _ => {
                let window = &ids[ctx_start..block_end];
                scorer
                    .score_suffix(window, block_start - ctx_start)
                    .map_err(|e| match e {
                        ScoreError::AtToken { token_index, source } => ScoreError::AtToken {
                            token_index: token_index + ctx_start,
                            source,
                        },
                        other => other.at(block_start),
                    })?
            }
        };
        if values.len() != block_end - block_start {
            return Err(ScoreError::Protocol(format!(
                "scorer returned {} values for a block of {}",
                values.len(),
                block_end - block_start
            )));
        }
        for (offset, v) in values.into_iter().enumerate() {
            let i = block_start + offset;
            out.push((check_value(v, i)?, i - ctx_start));
        }
    }
    Ok(out)
}

pub fn score_long<S: Scorer + ?Sized>(doc: &TokenizedDoc, scorer: &S) -> Result<Vec<f64>, ScoreError> {
    score_long_ids(&doc.ids(), scorer)
}

pub fn score_short_sliding<S: Scorer + ?Sized>(
    doc: &TokenizedDoc,
    scorer: &S,
    cfg: &WindowConfig,
) -> Result<Vec<(f64, usize)>, ScoreError> {
    score_short_ids(&doc.ids(), scorer, cfg, None)
}

/// Long and short passes combined into one record per token.
pub fn score_doc<S: Scorer + ?Sized>(
    doc: &TokenizedDoc,
    scorer: &S,
    cfg: &WindowConfig,
) -> Result<ScoredDoc, ScoreError> {
    let ids = doc.ids();
    let long = score_long_ids(&ids, scorer)?;
    let short = score_short_ids(&ids, scorer, cfg, Some(&long))?;
    let records = doc
        .tokens
        .iter()
        .zip(long.iter().zip(short))
        .enumerate()
        .map(|(i, (tok, (&logp_long, (logp_short, short_ctx_len))))| TokenScoreRecord {
            token_index: i,
            token_text: tok.text.clone(),
            span: tok.span,
            logp_long,
            logp_short,
            short_ctx_len,
        })
        .collect();
    Ok(ScoredDoc {
        doc_id: doc.doc_id.clone(),
        records,
    })
}
