use std::collections::HashMap;

use super::{ScoreError, Scorer};
use crate::tokenize::TokenizedDoc;

#[derive(Debug, Default, Clone)]
struct HistoryCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

/// Add-k smoothed n-gram model.
///
/// The history for position `i` is the previous `min(order - 1, i)` tokens,
/// both when counting and when querying, so the first tokens of a document
/// are conditioned on shorter histories rather than padding.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    k: f64,
    vocab_size: usize,
    counts: HashMap<Vec<u32>, HistoryCounts>,
}

impl NgramModel {
    /// Counts every document. `vocab_size` must exceed every id seen.
    pub fn train(
        corpus: &[TokenizedDoc],
        order: usize,
        smoothing_k: f64,
        vocab_size: usize,
    ) -> Result<Self, ScoreError> {
        if order == 0 {
            return Err(ScoreError::Config("n-gram order must be at least 1".into()));
        }
        if !(smoothing_k > 0.0 && smoothing_k.is_finite()) {
            return Err(ScoreError::Config(format!("smoothing k must be positive, got {smoothing_k}")));
        }
        if corpus.iter().all(TokenizedDoc::is_empty) {
            return Err(ScoreError::Config("cannot train an n-gram model on an empty corpus".into()));
        }
        let mut counts: HashMap<Vec<u32>, HistoryCounts> = HashMap::new();
        for doc in corpus {
            let ids = doc.ids();
            for (i, &t) in ids.iter().enumerate() {
                if t as usize >= vocab_size {
                    return Err(ScoreError::OutOfVocab(t));
                }
                let h = &ids[i.saturating_sub(order - 1)..i];
                let entry = counts.entry(h.to_vec()).or_default();
                entry.total += 1;
                *entry.next.entry(t).or_default() += 1;
            }
        }
        Ok(NgramModel {
            order,
            k: smoothing_k,
            vocab_size,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

/// Trains with the vocabulary size inferred as `max id + 1`.
pub fn ngram_lm_train(corpus: &[TokenizedDoc], order: usize, smoothing_k: f64) -> Result<NgramModel, ScoreError> {
    let vocab_size = corpus
        .iter()
        .flat_map(|d| d.tokens.iter().map(|t| t.id as usize + 1))
        .max()
        .unwrap_or(0);
    NgramModel::train(corpus, order, smoothing_k, vocab_size)
}

impl Scorer for NgramModel {
    fn logprob(&self, context: &[u32], target: u32) -> Result<f64, ScoreError> {
        if target as usize >= self.vocab_size {
            return Err(ScoreError::OutOfVocab(target));
        }
        let h = &context[context.len().saturating_sub(self.order - 1)..];
        let (c, total) = match self.counts.get(h) {
            Some(hc) => (hc.next.get(&target).copied().unwrap_or(0), hc.total),
            None => (0, 0),
        };
        let num = c as f64 + self.k;
        let den = total as f64 + self.k * self.vocab_size as f64;
        Ok((num / den).ln())
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::TokenizerSpec;
    use rand::{Rng, SeedableRng};

    #[test]
    fn unigram_frequency_as_k_vanishes() {
        let doc = TokenizerSpec::whitespace(["a", "b", "c"]).encode("a b a c").unwrap();
        let m = NgramModel::train(&[doc.clone()], 1, 1e-12, 5).unwrap();
        let a = doc.tokens[0].id;
        assert!((m.logprob(&[], a).unwrap() - 0.5f64.ln()).abs() < 1e-9);
        assert!((m.logprob(&[1, 2, 3], a).unwrap() - 0.5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn unseen_context_is_uniform() {
        let doc = TokenizerSpec::whitespace(["a", "b"]).encode("a b").unwrap();
        let m = NgramModel::train(&[doc], 2, 0.3, 7).unwrap();
        let v = m.logprob(&[0], 3).unwrap();
        assert!((v + 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn normalized_for_random_contexts() {
        let spec = TokenizerSpec::byte_level();
        let doc = spec.encode("the cat sat on the mat; the bat ate the rat").unwrap();
        let m = NgramModel::train(&[doc.clone()], 3, 0.1, 256).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let ids = doc.ids();
        for _ in 0..20 {
            let len = rng.random_range(0..5);
            let ctx: Vec<u32> = if rng.random_bool(0.5) && len <= ids.len() {
                let s = rng.random_range(0..=ids.len() - len);
                ids[s..s + len].to_vec()
            } else {
                (0..len).map(|_| rng.random_range(0..256)).collect()
            };
            let total: f64 = (0..256).map(|t| m.logprob(&ctx, t).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "{total}");
        }
    }

    #[test]
    fn config_errors() {
        let doc = TokenizerSpec::byte_level().encode("ab").unwrap();
        assert!(NgramModel::train(&[doc.clone()], 0, 1.0, 256).is_err());
        assert!(NgramModel::train(&[doc.clone()], 2, 0.0, 256).is_err());
        assert!(NgramModel::train(&[], 2, 1.0, 256).is_err());
        assert!(matches!(NgramModel::train(&[doc], 2, 1.0, 50), Err(ScoreError::OutOfVocab(97))));
    }
}
