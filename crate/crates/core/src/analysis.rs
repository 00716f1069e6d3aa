//! Correlation of a metric against benchmark scores, and key-token
//! highlighting that parses back to the same spans.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{compute_lpg, compute_lpv, KeyTokenMask};
use crate::scoring::ScoredDoc;
use crate::tokenize::{Span, TokenizedDoc};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("need at least 3 paired values, got {0}")]
    TooFewRows(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("non-finite value at row {0}")]
    NonFinite(usize),
    #[error("duplicate model name {0:?}")]
    DuplicateModel(String),
    #[error("annotation: {0}")]
    Annotate(String),
}

/// Product-moment correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(AnalysisError::TooFewRows(xs.len()));
    }
    if let Some(i) = xs.iter().zip(ys).position(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(AnalysisError::NonFinite(i));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(AnalysisError::ZeroVariance("ys"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkRow {
    pub model_name: String,
    pub metric_value: f64,
    pub benchmark_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BenchmarkScoreTable {
    pub rows: Vec<BenchmarkRow>,
}

impl BenchmarkScoreTable {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.rows.len() < 3 {
            return Err(AnalysisError::TooFewRows(self.rows.len()));
        }
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.model_name.as_str()) {
                return Err(AnalysisError::DuplicateModel(r.model_name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson_r: f64,
    pub n: usize,
    pub rows: Vec<BenchmarkRow>,
}

pub fn correlate(table: &BenchmarkScoreTable) -> Result<CorrelationReport, AnalysisError> {
    table.validate()?;
    let xs: Vec<f64> = table.rows.iter().map(|r| r.metric_value).collect();
    let ys: Vec<f64> = table.rows.iter().map(|r| r.benchmark_score).collect();
    Ok(CorrelationReport {
        pearson_r: pearson(&xs, &ys)?,
        n: xs.len(),
        rows: table.rows.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotateFormat {
    Ansi,
    Html,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySpan {
    pub span: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpv: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedDoc {
    pub text: String,
    pub key_spans: Vec<KeySpan>,
}

const ANSI_ON: &str = "\x1b[1;31m";
const ANSI_OFF: &str = "\x1b[0m";

impl AnnotatedDoc {
    pub fn new(text: impl Into<String>, key_spans: Vec<KeySpan>) -> Result<Self, AnalysisError> {
        let doc = AnnotatedDoc {
            text: text.into(),
            key_spans,
        };
        doc.validate()?;
        Ok(doc)
    }

    /// Spans must be in order, inside the text, and not overlap.
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let n = self.text.chars().count();
        let mut prev_end = 0;
        for k in &self.key_spans {
            if k.span.start > k.span.end || k.span.end > n {
                return Err(AnalysisError::Annotate(format!("span {} out of bounds for {n} characters", k.span)));
            }
            if k.span.start < prev_end {
                return Err(AnalysisError::Annotate(format!("span {} overlaps its predecessor", k.span)));
            }
            prev_end = k.span.end;
        }
        Ok(())
    }

    pub fn from_tokens(doc: &TokenizedDoc, mask: &KeyTokenMask) -> Result<Self, AnalysisError> {
        if mask.len() != doc.len() {
            return Err(AnalysisError::LengthMismatch(mask.len(), doc.len()));
        }
        let spans = mask
            .key_indices()
            .into_iter()
            .map(|i| KeySpan {
                span: doc.tokens[i].span,
                lpg: None,
                lpv: None,
            })
            .collect();
        Self::new(doc.source_text.clone(), spans)
    }

    pub fn from_scored(doc: &ScoredDoc, mask: &KeyTokenMask) -> Result<Self, AnalysisError> {
        if mask.len() != doc.len() {
            return Err(AnalysisError::LengthMismatch(mask.len(), doc.len()));
        }
        let spans = mask
            .key_indices()
            .into_iter()
            .map(|i| {
                let r = &doc.records[i];
                KeySpan {
                    span: r.span,
                    lpg: Some(compute_lpg(r)),
                    lpv: Some(compute_lpv(r)),
                }
            })
            .collect();
        Self::new(doc.source_text(), spans)
    }

    pub fn render(&self, format: AnnotateFormat) -> Result<String, AnalysisError> {
        self.validate()?;
        if format == AnnotateFormat::Ansi && self.text.contains('\x1b') {
            return Err(AnalysisError::Annotate("text contains escape characters".into()));
        }
        let chars: Vec<char> = self.text.chars().collect();
        let piece = |a: usize, b: usize, out: &mut String| {
            for &c in &chars[a..b] {
                match (format, c) {
                    (AnnotateFormat::Html, '&') => out.push_str("&amp;"),
                    (AnnotateFormat::Html, '<') => out.push_str("&lt;"),
                    (AnnotateFormat::Html, '>') => out.push_str("&gt;"),
                    _ => out.push(c),
                }
            }
        };
        let mut out = String::new();
        let mut at = 0;
        for k in &self.key_spans {
            piece(at, k.span.start, &mut out);
            match format {
                AnnotateFormat::Ansi => out.push_str(ANSI_ON),
                AnnotateFormat::Html => {
                    out.push_str("<mark");
                    if let Some(v) = k.lpg {
                        out.push_str(&format!(" data-lpg=\"{v:?}\""));
                    }
                    if let Some(v) = k.lpv {
                        out.push_str(&format!(" data-lpv=\"{v:?}\""));
                    }
                    out.push('>');
                }
            }
            piece(k.span.start, k.span.end, &mut out);
            out.push_str(match format {
                AnnotateFormat::Ansi => ANSI_OFF,
                AnnotateFormat::Html => "</mark>",
            });
            at = k.span.end;
        }
        piece(at, chars.len(), &mut out);
        Ok(out)
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(rendered: &str, format: AnnotateFormat) -> Result<Self, AnalysisError> {
        let bad = |m: &str| AnalysisError::Annotate(m.to_string());
        let mut text = String::new();
        let mut n = 0usize;
        let mut spans = Vec::new();
        let mut open: Option<KeySpan> = None;
        let mut rest = rendered;
        while !rest.is_empty() {
            match format {
                AnnotateFormat::Ansi => {
                    if let Some(r) = rest.strip_prefix(ANSI_ON) {
                        if open.is_some() {
                            return Err(bad("nested highlight"));
                        }
                        open = Some(KeySpan { span: Span::new(n, n), lpg: None, lpv: None });
                        rest = r;
                        continue;
                    }
                    if let Some(r) = rest.strip_prefix(ANSI_OFF) {
                        let mut k = open.take().ok_or_else(|| bad("unbalanced highlight end"))?;
                        k.span.end = n;
                        spans.push(k);
                        rest = r;
                        continue;
                    }
                    if rest.starts_with('\x1b') {
                        return Err(bad("unknown escape sequence"));
                    }
                }
                AnnotateFormat::Html => {
                    if let Some(r) = rest.strip_prefix("<mark") {
                        if open.is_some() {
                            return Err(bad("nested <mark>"));
                        }
                        let close = r.find('>').ok_or_else(|| bad("unterminated <mark>"))?;
                        let (lpg, lpv) = parse_mark_attrs(&r[..close])?;
                        open = Some(KeySpan { span: Span::new(n, n), lpg, lpv });
                        rest = &r[close + 1..];
                        continue;
                    }
                    if let Some(r) = rest.strip_prefix("</mark>") {
                        let mut k = open.take().ok_or_else(|| bad("unbalanced </mark>"))?;
                        k.span.end = n;
                        spans.push(k);
                        rest = r;
                        continue;
                    }
                    let entity = [("&amp;", '&'), ("&lt;", '<'), ("&gt;", '>')]
                        .into_iter()
                        .find(|(e, _)| rest.starts_with(e));
                    if let Some((e, c)) = entity {
                        text.push(c);
                        n += 1;
                        rest = &rest[e.len()..];
                        continue;
                    }
                    if rest.starts_with('<') {
                        return Err(bad("unexpected tag"));
                    }
                }
            }
            let c = rest.chars().next().expect("non-empty");
            text.push(c);
            n += 1;
            rest = &rest[c.len_utf8()..];
        }
        if open.is_some() {
            return Err(bad("highlight left open"));
        }
        Self::new(text, spans)
    }
}

fn parse_mark_attrs(attrs: &str) -> Result<(Option<f64>, Option<f64>), AnalysisError> {
    let mut lpg = None;
    let mut lpv = None;
    for part in attrs.split_whitespace() {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| AnalysisError::Annotate(format!("bad attribute {part:?}")))?;
        let value: f64 = value
            .trim_matches('"')
            .parse()
            .map_err(|_| AnalysisError::Annotate(format!("bad attribute value {part:?}")))?;
        match key {
            "data-lpg" => lpg = Some(value),
            "data-lpv" => lpv = Some(value),
            _ => return Err(AnalysisError::Annotate(format!("unknown attribute {key:?}"))),
        }
    }
    Ok((lpg, lpv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::TokenizerSpec;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), Err(AnalysisError::ZeroVariance("ys")));
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(AnalysisError::TooFewRows(2)));
    }

    fn table(rows: &[(&str, f64, f64)]) -> BenchmarkScoreTable {
        BenchmarkScoreTable {
            rows: rows
                .iter()
                .map(|&(m, x, y)| BenchmarkRow { model_name: m.into(), metric_value: x, benchmark_score: y })
                .collect(),
        }
    }

    #[test]
    fn correlate_checks_table() {
        let t = table(&[("a", 1.0, 10.0), ("b", 2.0, 20.0), ("c", 3.0, 30.0)]);
        let r = correlate(&t).unwrap();
        assert_eq!(r.n, 3);
        assert!((r.pearson_r - 1.0).abs() < 1e-15);
        assert!(matches!(correlate(&table(&[("a", 1.0, 1.0), ("b", 2.0, 3.0)])), Err(AnalysisError::TooFewRows(2))));
        let dup = table(&[("a", 1.0, 1.0), ("a", 2.0, 3.0), ("c", 0.0, 1.0)]);
        assert!(matches!(correlate(&dup), Err(AnalysisError::DuplicateModel(_))));
        let json = serde_json::to_string(&t).unwrap();
        assert!(json.starts_with("[{\"model_name\""));
    }

    #[test]
    fn shuffled_pairs_are_nearly_uncorrelated() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..20_000).map(|i| i as f64).collect();
        let mut ys = xs.clone();
        ys.shuffle(&mut rng);
        assert!(pearson(&xs, &ys).unwrap().abs() < 0.03);
    }

    fn sample() -> AnnotatedDoc {
        let doc = TokenizerSpec::byte_level().encode_doc("d", "a <b> & ĉ\tend").unwrap();
        let flags = (0..doc.len()).map(|i| i % 3 == 1).collect();
        AnnotatedDoc::from_tokens(&doc, &KeyTokenMask::from_flags(flags)).unwrap()
    }

    #[test]
    fn annotation_round_trips() {
        let mut doc = sample();
        for f in [AnnotateFormat::Ansi, AnnotateFormat::Html] {
            assert_eq!(AnnotatedDoc::parse(&doc.render(f).unwrap(), f).unwrap(), doc);
        }
        for (i, k) in doc.key_spans.iter_mut().enumerate() {
            k.lpg = Some(0.1 * i as f64 + 1.0 / 3.0);
            k.lpv = Some(-2.5e-7 * i as f64);
        }
        let html = doc.render(AnnotateFormat::Html).unwrap();
        assert_eq!(AnnotatedDoc::parse(&html, AnnotateFormat::Html).unwrap(), doc);
    }

    #[test]
    fn annotation_examples() {
        let doc = TokenizerSpec::whitespace_from_texts(["one two three"]).encode_doc("d", "one two three").unwrap();
        let none = AnnotatedDoc::from_tokens(&doc, &KeyTokenMask::from_flags(vec![false; 3])).unwrap();
        assert_eq!(none.render(AnnotateFormat::Html).unwrap(), "one two three");
        let one = AnnotatedDoc::from_tokens(&doc, &KeyTokenMask::from_flags(vec![false, true, false])).unwrap();
        let html = one.render(AnnotateFormat::Html).unwrap();
        assert_eq!(html, "one <mark>two </mark>three");
        assert_eq!(one.render(AnnotateFormat::Ansi).unwrap().matches(ANSI_ON).count(), 1);
        assert!(AnnotatedDoc::new("abc", vec![KeySpan { span: Span::new(2, 4), lpg: None, lpv: None }]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_invariants(
            xs in prop::collection::vec(-100.0f64..100.0, 3..40),
            seed in any::<u64>(),
            a in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0],
            b in -100.0f64..100.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
            let r = pearson(&xs, &ys).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert_eq!(r, pearson(&ys, &xs).unwrap());
            let axb: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            prop_assert!((pearson(&axb, &ys).unwrap() - a.signum() * r).abs() < 1e-9);
        }
    }
}
