//! Synthetic "lines" retrieval documents with labelled answer tokens, and an
//! oracle scorer whose long/short-context behaviour is fixed by construction.
//!
//! Template, one record per line followed by a question and the gold answer:
//!
//! ```text
//! line tender-clause: REGISTER_CONTENT is <45129>
//! ...
//! What is the REGISTER_CONTENT in line tender-clause?
//! Answer: The REGISTER_CONTENT in line tender-clause is <45129>.
//! ```
//!
//! The answer tokens are the value digits in the last line. The companion
//! BPE tokenizer never merges digits, so every digit is its own token.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::KeyTokenMask;
use crate::scoring::{ScoreError, Scorer};
use crate::tokenize::{Span, TokenizeError, TokenizedDoc, TokenizerSpec, Vocab, UNK_TOKEN};

pub const DEFAULT_FILLER: [&str; 24] = [
    "tender", "clause", "amber", "river", "silent", "marble", "copper", "violet", "harbor", "meadow",
    "crystal", "falcon", "orbit", "canyon", "ember", "lantern", "quartz", "willow", "summit", "velvet",
    "cobalt", "thistle", "prairie", "glacier",
];

const RECORD_KEY: &str = "REGISTER_CONTENT";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("invalid oracle spec: {0}")]
    Oracle(String),
    #[error("tokenizer boundaries split the answer value: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("selection metrics undefined: {0}")]
    Undefined(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinesTaskSpec {
    pub n_lines: usize,
    pub value_digits: usize,
    pub target_line: usize,
    pub seed: u64,
    pub filler_vocab: Vec<String>,
}

impl LinesTaskSpec {
    pub fn new(n_lines: usize, value_digits: usize, target_line: usize, seed: u64) -> Self {
        LinesTaskSpec {
            n_lines,
            value_digits,
            target_line,
            seed,
            filler_vocab: DEFAULT_FILLER.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_lines == 0 || self.target_line >= self.n_lines {
            return Err(SynthError::Spec(format!(
                "need 0 <= target_line < n_lines, got {} / {}",
                self.target_line, self.n_lines
            )));
        }
        if self.value_digits == 0 {
            return Err(SynthError::Spec("value_digits must be positive".into()));
        }
        let distinct: HashSet<&String> = self.filler_vocab.iter().collect();
        if distinct.len() < 2 {
            return Err(SynthError::Spec("filler_vocab needs at least two distinct words".into()));
        }
        if self
            .filler_vocab
            .iter()
            .any(|w| w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()))
        {
            return Err(SynthError::Spec("filler words must be non-empty lowercase ASCII".into()));
        }
        Ok(())
    }
}

/// Specs for `n_docs` documents with seeds `seed, seed + 1, ...` and target
/// lines drawn uniformly from `0..max_target`.
pub fn corpus_specs(
    n_docs: usize,
    n_lines: usize,
    value_digits: usize,
    seed: u64,
    max_target: usize,
    filler_vocab: &[String],
) -> Result<Vec<LinesTaskSpec>, SynthError> {
    if max_target == 0 || max_target > n_lines {
        return Err(SynthError::Spec(format!("max_target {max_target} must lie in 1..={n_lines}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs as u64)
        .map(|i| {
            let spec = LinesTaskSpec {
                n_lines,
                value_digits,
                target_line: rng.random_range(0..max_target),
                seed: seed.wrapping_add(i),
                filler_vocab: filler_vocab.to_vec(),
            };
            spec.validate().map(|_| spec)
        })
        .collect()
}

/// Generated text with the character spans needed for labelling.
#[derive(Clone, Debug, PartialEq)]
pub struct LinesText {
    pub text: String,
    pub answer_value: String,
    /// Value digits inside the gold answer.
    pub answer_span: Span,
    /// The whole target record line.
    pub target_line_span: Span,
    /// Line name inside the question.
    pub question_name_span: Span,
}

/// On-disk form of a generated task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinesRecord {
    pub doc_id: String,
    pub text: String,
    pub answer_span: Span,
    pub answer_value: String,
}

fn line_name(rng: &mut ChaCha8Rng, words: &[String], parts: usize) -> String {
    (0..parts)
        .map(|_| words.choose(rng).expect("validated non-empty").as_str())
        .collect::<Vec<_>>()
        .join("-")
}

pub fn generate_lines_text(spec: &LinesTaskSpec) -> Result<LinesText, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut words: Vec<String> = spec.filler_vocab.clone();
    words.sort();
    words.dedup();

    let mut parts = 2;
    while (words.len() as f64).powi(parts as i32) < 2.0 * spec.n_lines as f64 {
        parts += 1;
    }
    let value_space = 10f64.powi(spec.value_digits as i32);
    let unique_values = value_space >= 2.0 * spec.n_lines as f64;

    let mut names = HashSet::new();
    let mut values = HashSet::new();
    let mut text = String::new();
    let mut chars = 0usize;
    let mut push = |text: &mut String, s: &str| {
        text.push_str(s);
        chars += s.chars().count();
        chars
    };
    let mut target = None;
    for line in 0..spec.n_lines {
        let name = loop {
            let n = line_name(&mut rng, &words, parts);
            if names.insert(n.clone()) {
                break n;
            }
        };
        let value = loop {
            let v: String = (0..spec.value_digits)
                .map(|_| char::from(b'0' + rng.random_range(0..10u8)))
                .collect();
            if !unique_values || values.insert(v.clone()) {
                break v;
            }
        };
        let start = push(&mut text, "");
        let end = push(&mut text, &format!("line {name}: {RECORD_KEY} is <{value}>\n"));
        if line == spec.target_line {
            target = Some((name, value, Span::new(start, end)));
        }
    }
    let (name, value, target_line_span) = target.expect("target_line < n_lines");
    let q_start = push(&mut text, &format!("What is the {RECORD_KEY} in line "));
    let q_end = push(&mut text, &name);
    push(&mut text, &format!("?\nAnswer: The {RECORD_KEY} in line {name} is <"));
    let a_start = push(&mut text, "");
    let a_end = push(&mut text, &value);
    push(&mut text, ">.");
    Ok(LinesText {
        text,
        answer_value: value,
        answer_span: Span::new(a_start, a_end),
        target_line_span,
        question_name_span: Span::new(q_start, q_end),
    })
}

/// BPE vocabulary for lines documents: printable ASCII plus merges that
/// build the template words and two halves of each filler word. Digits are
/// never merged.
pub fn lines_tokenizer(filler_vocab: &[String]) -> TokenizerSpec {
    let mut entries: Vec<String> = (0x20u8..0x7f).map(|b| char::from(b).to_string()).collect();
    entries.push("\n".into());
    entries.push(UNK_TOKEN.into());
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut known: HashSet<String> = entries.iter().cloned().collect();
    let mut known_merges = HashSet::new();
    let mut add_piece = |piece: &str, entries: &mut Vec<String>, merges: &mut Vec<(String, String)>| {
        let chars: Vec<char> = piece.chars().collect();
        let mut acc = chars[0].to_string();
        for c in &chars[1..] {
            let next = format!("{acc}{c}");
            if known_merges.insert((acc.clone(), c.to_string())) {
                merges.push((acc.clone(), c.to_string()));
            }
            if known.insert(next.clone()) {
                entries.push(next.clone());
            }
            acc = next;
        }
    };
    for piece in [
        "line", " line", " REG", "ISTER", "_CONT", "ENT", " is", "What", " the", " in", "Answer", " The",
    ] {
        add_piece(piece, &mut entries, &mut merges);
    }
    let mut words: Vec<&String> = filler_vocab.iter().collect();
    words.sort();
    words.dedup();
    for w in words {
        let mid = w.len().div_ceil(2);
        let (head, tail) = w.split_at(mid);
        for piece in [format!(" {head}"), head.to_string(), tail.to_string()] {
            if piece.chars().count() > 1 {
                add_piece(&piece, &mut entries, &mut merges);
            }
        }
    }
    let vocab = Vocab::from_entries(entries).expect("entries deduplicated");
    TokenizerSpec::bpe(vocab, merges).expect("merges built from vocabulary")
}

/// A tokenized lines document with its ground-truth token classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDoc {
    pub doc: TokenizedDoc,
    pub answer_token_indices: Vec<usize>,
    pub answer_value: String,
    /// Tokens of the line name inside the question: predictable only from
    /// the record list, and hard to guess even then.
    pub question_name_indices: Vec<usize>,
    /// First token of the target record line.
    pub target_line_token: usize,
}

impl LabeledDoc {
    pub fn to_record(&self) -> LinesRecord {
        let first = &self.doc.tokens[self.answer_token_indices[0]];
        let last = &self.doc.tokens[*self.answer_token_indices.last().expect("non-empty")];
        LinesRecord {
            doc_id: self.doc.doc_id.clone(),
            text: self.doc.source_text.clone(),
            answer_span: Span::new(first.span.start, last.span.end),
            answer_value: self.answer_value.clone(),
        }
    }
}

fn tokens_within(doc: &TokenizedDoc, span: Span) -> Vec<usize> {
    doc.tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.span.is_empty() && t.span.start >= span.start && t.span.end <= span.end)
        .map(|(i, _)| i)
        .collect()
}

/// Tokens lying inside `answer_span`; they must decode to `answer_value`.
pub fn answer_tokens(doc: &TokenizedDoc, answer_span: Span, answer_value: &str) -> Result<Vec<usize>, SynthError> {
    let answer = tokens_within(doc, answer_span);
    let covered: String = answer.iter().map(|&i| doc.tokens[i].text.as_str()).collect();
    if covered != answer_value || answer.is_empty() {
        return Err(SynthError::Misaligned(format!(
            "answer tokens decode to {covered:?}, expected {answer_value:?}"
        )));
    }
    Ok(answer)
}

/// Tokenizes generated text and locates the labelled tokens. Fails when the
/// tokenizer does not cut exactly at the answer boundaries.
pub fn label_with(doc_id: &str, lt: &LinesText, tokenizer: &TokenizerSpec) -> Result<LabeledDoc, SynthError> {
    let doc = tokenizer.encode_doc(doc_id, &lt.text)?;
    let answer = answer_tokens(&doc, lt.answer_span, &lt.answer_value)?;
    let question_name_indices = tokens_within(&doc, lt.question_name_span);
    let target_line_token = doc
        .tokens
        .iter()
        .position(|t| t.span.end > lt.target_line_span.start)
        .expect("target line lies inside the text");
    Ok(LabeledDoc {
        doc,
        answer_token_indices: answer,
        answer_value: lt.answer_value.clone(),
        question_name_indices,
        target_line_token,
    })
}

/// Generates a task and tokenizes it with [`lines_tokenizer`].
pub fn generate_lines_task(spec: &LinesTaskSpec) -> Result<LabeledDoc, SynthError> {
    let lt = generate_lines_text(spec)?;
    let tok = lines_tokenizer(&spec.filler_vocab);
    label_with(&format!("lines-{}", spec.seed), &lt, &tok)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub p_long: f64,
    pub p_short: f64,
}

/// Probabilities the oracle assigns to the true next token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub p_answer_long: f64,
    pub p_answer_short: f64,
    pub p_filler: f64,
    /// When set, the question's line-name tokens form a third class.
    #[serde(default)]
    pub distractor: Option<DistractorSpec>,
}

impl OracleSpec {
    /// Builds a spec from log-space margins: `ln(p_long / p_short)` and
    /// `ln(p_long)`.
    pub fn from_margins(lpg: f64, lpv: f64, p_filler: f64) -> Self {
        OracleSpec {
            p_answer_long: lpv.exp(),
            p_answer_short: (lpv - lpg).exp(),
            p_filler,
            distractor: None,
        }
    }

    /// Probabilities must lie in `(0, 1)` so that the remaining mass spread
    /// over other tokens keeps every log-probability finite.
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut ps = vec![
            ("p_answer_long", self.p_answer_long),
            ("p_answer_short", self.p_answer_short),
            ("p_filler", self.p_filler),
        ];
        if let Some(d) = self.distractor {
            ps.push(("distractor.p_long", d.p_long));
            ps.push(("distractor.p_short", d.p_short));
            if d.p_long <= d.p_short {
                return Err(SynthError::Oracle("distractor p_long must exceed p_short".into()));
            }
        }
        for (name, p) in ps {
            if !(p > 0.0 && p < 1.0) {
                return Err(SynthError::Oracle(format!("{name} = {p} must lie in (0, 1)")));
            }
        }
        if self.p_answer_long <= self.p_answer_short {
            return Err(SynthError::Oracle("p_answer_long must exceed p_answer_short".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TokenClass {
    Filler,
    Answer,
    Distractor,
}

/// Scorer that knows the document it is asked about. It locates a context
/// by matching it against the document, and gives the true next token the
/// probability of its class; the rest of the mass is spread uniformly.
pub struct OracleScorer {
    ids: Vec<u32>,
    classes: Vec<TokenClass>,
    target_line_token: usize,
    vocab_size: usize,
    spec: OracleSpec,
}

pub fn oracle_scorer(labeled: &LabeledDoc, ospec: OracleSpec, vocab_size: usize) -> Result<OracleScorer, SynthError> {
    ospec.validate()?;
    let ids = labeled.doc.ids();
    if vocab_size < 2 || ids.iter().any(|&t| t as usize >= vocab_size) {
        return Err(SynthError::Oracle(format!("vocab_size {vocab_size} does not cover the document")));
    }
    let mut classes = vec![TokenClass::Filler; ids.len()];
    for &i in &labeled.answer_token_indices {
        classes[i] = TokenClass::Answer;
    }
    if ospec.distractor.is_some() {
        for &i in &labeled.question_name_indices {
            classes[i] = TokenClass::Distractor;
        }
    }
    Ok(OracleScorer {
        ids,
        classes,
        target_line_token: labeled.target_line_token,
        vocab_size,
        spec: ospec,
    })
}

impl OracleScorer {
    /// Offsets at which `window` occurs in the document, preferring the
    /// document start.
    fn locate(&self, window: &[u32]) -> Result<usize, ScoreError> {
        if self.ids.starts_with(window) {
            return Ok(0);
        }
        let mut hits = (1..=self.ids.len().saturating_sub(window.len()))
            .filter(|&c| self.ids[c..c + window.len()] == *window);
        match (hits.next(), hits.next()) {
            (Some(c), None) => Ok(c),
            (None, _) => Err(ScoreError::Protocol("context does not occur in the oracle document".into())),
            (Some(_), Some(_)) => Err(ScoreError::Protocol("context occurs more than once in the oracle document".into())),
        }
    }

    fn true_prob(&self, position: usize, context_start: usize) -> f64 {
        let sees_target = context_start <= self.target_line_token;
        match self.classes[position] {
            TokenClass::Filler => self.spec.p_filler,
            TokenClass::Answer if sees_target => self.spec.p_answer_long,
            TokenClass::Answer => self.spec.p_answer_short,
            TokenClass::Distractor => {
                let d = self.spec.distractor.expect("class assigned only with a distractor spec");
                if sees_target {
                    d.p_long
                } else {
                    d.p_short
                }
            }
        }
    }

    fn logprob_at(&self, position: usize, context_start: usize, target: u32) -> Result<f64, ScoreError> {
        if target as usize >= self.vocab_size {
            return Err(ScoreError::OutOfVocab(target));
        }
        if position >= self.ids.len() {
            return Ok(-(self.vocab_size as f64).ln());
        }
        let p = self.true_prob(position, context_start);
        let q = if target == self.ids[position] {
            p
        } else {
            (1.0 - p) / (self.vocab_size - 1) as f64
        };
        Ok(q.ln())
    }
}

impl Scorer for OracleScorer {
    fn logprob(&self, context: &[u32], target: u32) -> Result<f64, ScoreError> {
        let start = self.locate(context)?;
        self.logprob_at(start + context.len(), start, target)
    }

    fn score_suffix(&self, tokens: &[u32], from: usize) -> Result<Vec<f64>, ScoreError> {
        let start = self.locate(tokens)?;
        (from..tokens.len())
            .map(|i| self.logprob_at(start + i, start, tokens[i]))
            .collect()
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.vocab_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    /// Mean of the recall on answer tokens and on non-answer tokens.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// Scores a key-token mask as a classifier of answer tokens.
pub fn selection_accuracy(mask: &KeyTokenMask, labeled: &LabeledDoc) -> Result<SelectionScores, SynthError> {
    selection_accuracy_pooled(&[(mask, labeled)])
}

pub fn selection_accuracy_pooled(items: &[(&KeyTokenMask, &LabeledDoc)]) -> Result<SelectionScores, SynthError> {
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (mask, labeled) in items {
        if mask.len() != labeled.doc.len() {
            return Err(SynthError::Undefined(format!(
                "mask has {} entries for {} tokens",
                mask.len(),
                labeled.doc.len()
            )));
        }
        let positives: HashSet<usize> = labeled.answer_token_indices.iter().copied().collect();
        for (i, &flag) in mask.flags().iter().enumerate() {
            match (flag, positives.contains(&i)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fneg += 1,
            }
        }
    }
    if tp + fneg == 0 {
        return Err(SynthError::Undefined("no answer tokens".into()));
    }
    let recall = tp as f64 / (tp + fneg) as f64;
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let accuracy = if tn + fp == 0 {
        recall
    } else {
        0.5 * (recall + tn as f64 / (tn + fp) as f64)
    };
    Ok(SelectionScores {
        accuracy,
        precision,
        recall,
        true_pos: tp,
        false_pos: fp,
        true_neg: tn,
        false_neg: fneg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{compute_lpg, select_key_tokens, InfluenceConfig};
    use crate::scoring::{score_doc, WindowConfig};
    use crate::tokenize::decode;

    #[test]
    fn generation_is_deterministic_in_seed() {
        let spec = LinesTaskSpec::new(3, 5, 1, 42);
        assert_eq!(generate_lines_task(&spec).unwrap(), generate_lines_task(&spec).unwrap());
        let other = LinesTaskSpec { seed: 43, ..spec.clone() };
        assert_ne!(generate_lines_text(&spec).unwrap().text, generate_lines_text(&other).unwrap().text);
    }

    #[test]
    fn answer_tokens_decode_to_target_value() {
        for seed in 0..20 {
            let spec = LinesTaskSpec::new(6, 5, (seed % 6) as usize, seed);
            let lt = generate_lines_text(&spec).unwrap();
            let labeled = generate_lines_task(&spec).unwrap();
            let answer: Vec<_> = labeled
                .answer_token_indices
                .iter()
                .map(|&i| labeled.doc.tokens[i].clone())
                .collect();
            assert_eq!(decode(&answer), labeled.answer_value);
            assert_eq!(answer.len(), 5);
            let target_line = lt.text.lines().nth(spec.target_line).unwrap();
            assert!(target_line.ends_with(&format!("<{}>", labeled.answer_value)), "{target_line}");
            let start = &labeled.doc.tokens[labeled.target_line_token];
            assert_eq!(start.span.start, lt.target_line_span.start);
        }
    }

    #[test]
    fn record_shape() {
        let labeled = generate_lines_task(&LinesTaskSpec::new(2, 3, 0, 1)).unwrap();
        let rec = labeled.to_record();
        let chars: Vec<char> = rec.text.chars().collect();
        let value: String = chars[rec.answer_span.start..rec.answer_span.end].iter().collect();
        assert_eq!(value, rec.answer_value);
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.starts_with("{\"doc_id\":") && line.contains("\"answer_span\":["));
    }

    #[test]
    fn full_length_task_is_about_32k_tokens() {
        let labeled = generate_lines_task(&LinesTaskSpec::new(1350, 5, 600, 3)).unwrap();
        let n = labeled.doc.len();
        assert!((24_000..=40_000).contains(&n), "{n} tokens");
    }

    #[test]
    fn invalid_specs() {
        assert!(LinesTaskSpec::new(3, 5, 3, 0).validate().is_err());
        assert!(LinesTaskSpec::new(3, 0, 0, 0).validate().is_err());
        let mut s = LinesTaskSpec::new(3, 5, 0, 0);
        s.filler_vocab = vec!["a".into()];
        assert!(s.validate().is_err());
        let bad = OracleSpec { p_answer_long: 0.1, p_answer_short: 0.2, p_filler: 0.5, distractor: None };
        assert!(bad.validate().is_err());
    }

    fn oracle_setup(ospec: OracleSpec) -> (LabeledDoc, OracleScorer) {
        let spec = LinesTaskSpec::new(12, 5, 1, 9);
        let labeled = generate_lines_task(&spec).unwrap();
        let v = lines_tokenizer(&spec.filler_vocab).vocab_size();
        let o = oracle_scorer(&labeled, ospec, v).unwrap();
        (labeled, o)
    }

    #[test]
    fn oracle_values_by_class() {
        let ospec = OracleSpec { p_answer_long: 0.9, p_answer_short: 0.01, p_filler: 0.3, distractor: None };
        let (labeled, o) = oracle_setup(ospec);
        let scored = score_doc(&labeled.doc, &o, &WindowConfig::new(32, 8).unwrap()).unwrap();
        let expected_lpg = (0.9f64 / 0.01).ln();
        assert!((expected_lpg - 4.4998).abs() < 1e-4);
        for (i, r) in scored.records.iter().enumerate() {
            if labeled.answer_token_indices.contains(&i) {
                assert_eq!(r.logp_long, 0.9f64.ln());
                assert!((compute_lpg(r) - expected_lpg).abs() < 1e-12);
            } else {
                assert_eq!(compute_lpg(r), 0.0);
                assert_eq!(r.logp_long, 0.3f64.ln());
            }
        }
        let mask = select_key_tokens(&scored, &InfluenceConfig::default());
        let s = selection_accuracy(&mask, &labeled).unwrap();
        assert_eq!((s.accuracy, s.precision, s.recall), (1.0, 1.0, 1.0));
    }

    #[test]
    fn oracle_distribution_sums_to_one() {
        let ospec = OracleSpec { p_answer_long: 0.9, p_answer_short: 0.01, p_filler: 0.3, distractor: None };
        let (labeled, o) = oracle_setup(ospec);
        let ids = labeled.doc.ids();
        let v = o.vocab_size().unwrap() as u32;
        for pos in [0, 1, labeled.answer_token_indices[2]] {
            let total: f64 = (0..v).map(|t| o.logprob(&ids[..pos], t).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_mask_scores_one_and_empty_labels_error() {
        let mut labeled = generate_lines_task(&LinesTaskSpec::new(3, 4, 0, 5)).unwrap();
        let mut flags = vec![false; labeled.doc.len()];
        for &i in &labeled.answer_token_indices {
            flags[i] = true;
        }
        let s = selection_accuracy(&KeyTokenMask::from_flags(flags.clone()), &labeled).unwrap();
        assert_eq!(s.accuracy, 1.0);
        labeled.answer_token_indices.clear();
        assert!(selection_accuracy(&KeyTokenMask::from_flags(flags), &labeled).is_err());
    }
}
