//! Transfer of key tokens and soft weights between two tokenizations of the
//! same text.
//!
//! Both directions go through a per-character table built from the
//! evaluator's spans. A hard key token of the evaluated model must have
//! every character it covers inside an evaluator key token; a soft weight is
//! the character-level mean of the evaluator weights under the token.

use thiserror::Error;

use crate::metrics::KeyTokenMask;
use crate::scoring::ScoredDoc;
use crate::tokenize::{Span, TokenizedDoc};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("source texts differ ({evaluator} vs {evaluated} characters, first difference at {at})")]
    SourceMismatch {
        evaluator: usize,
        evaluated: usize,
        at: usize,
    },
    #[error("{what}: expected {expected} entries, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("evaluator spans do not tile the text: {0}")]
    BadSpans(String),
}

/// A text and the spans one tokenizer cut it into.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub text: String,
    pub spans: Vec<Span>,
}

impl Segmentation {
    pub fn new(text: impl Into<String>, spans: Vec<Span>) -> Self {
        Segmentation {
            text: text.into(),
            spans,
        }
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

impl From<&TokenizedDoc> for Segmentation {
    fn from(doc: &TokenizedDoc) -> Self {
        Segmentation::new(doc.source_text.clone(), doc.spans())
    }
}

impl From<&ScoredDoc> for Segmentation {
    fn from(doc: &ScoredDoc) -> Self {
        Segmentation::new(doc.source_text(), doc.spans())
    }
}

/// Evaluator token index owning each character of the text.
#[derive(Clone, Debug)]
pub struct CharWeightIndex {
    owner: Vec<usize>,
}

impl CharWeightIndex {
    pub fn build(seg: &Segmentation) -> Result<Self, AlignError> {
        let n = seg.text.chars().count();
        let mut owner = vec![usize::MAX; n];
        for (t, span) in seg.spans.iter().enumerate() {
            if span.end > n {
                return Err(AlignError::BadSpans(format!("span {span} exceeds {n} characters")));
            }
            for slot in &mut owner[span.start..span.end] {
                if *slot != usize::MAX {
                    return Err(AlignError::BadSpans(format!("span {span} overlaps token {}", *slot)));
                }
                *slot = t;
            }
        }
        if let Some(c) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(AlignError::BadSpans(format!("character {c} belongs to no token")));
        }
        Ok(CharWeightIndex { owner })
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn owner(&self, char_index: usize) -> usize {
        self.owner[char_index]
    }

    /// Per-character values read through the owning token.
    pub fn spread<T: Copy>(&self, per_token: &[T]) -> Vec<T> {
        self.owner.iter().map(|&t| per_token[t]).collect()
    }
}

fn check_same_text(evaluator: &Segmentation, evaluated: &Segmentation) -> Result<(), AlignError> {
    if evaluator.text == evaluated.text {
        return Ok(());
    }
    let at = evaluator
        .text
        .chars()
        .zip(evaluated.text.chars())
        .position(|(a, b)| a != b)
        .unwrap_or_else(|| evaluator.text.chars().count().min(evaluated.text.chars().count()));
    Err(AlignError::SourceMismatch {
        evaluator: evaluator.text.chars().count(),
        evaluated: evaluated.text.chars().count(),
        at,
    })
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), AlignError> {
    if expected == got {
        Ok(())
    } else {
        Err(AlignError::Length { what, expected, got })
    }
}

/// Largest set of evaluated tokens whose text lies inside the evaluator's
/// key tokens. Since the condition is checked token by token, the maximal
/// set is the union of all tokens that satisfy it individually.
pub fn project_key_tokens_hard(
    evaluator: &Segmentation,
    mask: &KeyTokenMask,
    evaluated: &Segmentation,
) -> Result<KeyTokenMask, AlignError> {
    check_same_text(evaluator, evaluated)?;
    check_len("evaluator mask", evaluator.len(), mask.len())?;
    // zero-width tokens share a character with their neighbour, so the
    // character rule alone would not reproduce them
    if evaluator.spans == evaluated.spans {
        CharWeightIndex::build(evaluator)?;
        return Ok(mask.clone());
    }
    let index = CharWeightIndex::build(evaluator)?;
    let key_chars = index.spread(mask.flags());
    let n = key_chars.len();
    let flags = evaluated
        .spans
        .iter()
        .map(|span| {
            let cover = span.coverage(n);
            !cover.is_empty() && key_chars[cover].iter().all(|&k| k)
        })
        .collect();
    Ok(KeyTokenMask::from_flags(flags))
}

/// Character-averaged transfer of per-token weights.
pub fn project_weights_soft(
    evaluator: &Segmentation,
    weights: &[f64],
    evaluated: &Segmentation,
) -> Result<Vec<f64>, AlignError> {
    check_same_text(evaluator, evaluated)?;
    check_len("evaluator weights", evaluator.len(), weights.len())?;
    if evaluator.spans == evaluated.spans {
        CharWeightIndex::build(evaluator)?;
        return Ok(weights.to_vec());
    }
    let index = CharWeightIndex::build(evaluator)?;
    let char_w = index.spread(weights);
    let n = char_w.len();
    Ok(evaluated
        .spans
        .iter()
        .map(|span| {
            let cover = span.coverage(n);
            if cover.is_empty() {
                return 0.0;
            }
            run_mean(&char_w[cover])
        })
        .collect())
}

/// Mean computed over runs of equal values, so a constant slice returns
/// that constant bit-for-bit.
fn run_mean(values: &[f64]) -> f64 {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    let mut acc = 0.0;
    let mut run_value = first;
    let mut run_len = 0usize;
    for &v in values {
        if v == run_value {
            run_len += 1;
        } else {
            acc += run_value * run_len as f64;
            run_value = v;
            run_len = 1;
        }
    }
    acc += run_value * run_len as f64;
    acc / values.len() as f64
}
