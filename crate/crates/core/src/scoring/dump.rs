//! JSONL transport for per-token scores: one object per token, documents
//! laid out contiguously, floats written with 17 significant digits.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ScoredDoc, TokenScoreRecord};
use crate::tokenize::Span;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

/// Optional per-token metric columns appended after the score fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagnostics {
    pub lpg: f64,
    pub lpv: f64,
    pub is_key: bool,
    pub soft_w: f64,
}

/// One line of a dump file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpRow {
    pub doc_id: String,
    pub token_index: usize,
    pub token_text: String,
    pub span: Span,
    pub logp_long: f64,
    pub logp_short: f64,
    pub short_ctx_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_key: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_w: Option<f64>,
}

impl DumpRow {
    pub fn diagnostics(&self) -> Option<TokenDiagnostics> {
        Some(TokenDiagnostics {
            lpg: self.lpg?,
            lpv: self.lpv?,
            is_key: self.is_key?,
            soft_w: self.soft_w?,
        })
    }

    fn record(&self) -> TokenScoreRecord {
        TokenScoreRecord {
            token_index: self.token_index,
            token_text: self.token_text.clone(),
            span: self.span,
            logp_long: self.logp_long,
            logp_short: self.logp_short,
            short_ctx_len: self.short_ctx_len,
        }
    }
}

/// 17 significant digits in JSON-compatible exponent notation.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_row(doc_id: &str, r: &TokenScoreRecord, diag: Option<&TokenDiagnostics>) -> String {
    let mut line = format!(
        "{{\"doc_id\":{},\"token_index\":{},\"token_text\":{},\"span\":[{},{}],\"logp_long\":{},\"logp_short\":{},\"short_ctx_len\":{}",
        serde_json::to_string(doc_id).expect("string serializes"),
        r.token_index,
        serde_json::to_string(&r.token_text).expect("string serializes"),
        r.span.start,
        r.span.end,
        fmt_f64(r.logp_long),
        fmt_f64(r.logp_short),
        r.short_ctx_len,
    );
    if let Some(d) = diag {
        line.push_str(&format!(
            ",\"lpg\":{},\"lpv\":{},\"is_key\":{},\"soft_w\":{}",
            fmt_f64(d.lpg),
            fmt_f64(d.lpv),
            d.is_key,
            fmt_f64(d.soft_w)
        ));
    }
    line.push('}');
    line
}

fn create(path: &Path) -> Result<BufWriter<File>, DumpError> {
    File::create(path).map(BufWriter::new).map_err(|source| DumpError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes docs as JSONL. `diagnostics`, when given, holds one slice per doc
/// aligned with its records.
pub fn write_dump_rows<W: Write>(
    mut out: W,
    docs: &[ScoredDoc],
    diagnostics: Option<&[Vec<TokenDiagnostics>]>,
) -> std::io::Result<()> {
    for (di, doc) in docs.iter().enumerate() {
        let diag = diagnostics.map(|d| &d[di]);
        for (ri, r) in doc.records.iter().enumerate() {
            writeln!(out, "{}", format_row(&doc.doc_id, r, diag.map(|d| &d[ri])))?;
        }
    }
    out.flush()
}

pub fn write_dump(docs: &[ScoredDoc], path: &Path) -> Result<(), DumpError> {
    let w = create(path)?;
    write_dump_rows(w, docs, None).map_err(|source| DumpError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Parses a dump into raw rows, grouped into documents, with every
/// document validated.
pub fn read_dump_rows(path: &Path) -> Result<Vec<Vec<DumpRow>>, DumpError> {
    let file = File::open(path).map_err(|source| DumpError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_rows(BufReader::new(file))
}

pub(crate) fn parse_rows<R: BufRead>(reader: R) -> Result<Vec<Vec<DumpRow>>, DumpError> {
    let mut docs: Vec<(usize, Vec<DumpRow>)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DumpError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: DumpRow = serde_json::from_str(&line).map_err(|e| DumpError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match docs.last_mut() {
            Some((_, rows)) if rows[0].doc_id == row.doc_id => rows.push(row),
            _ => {
                if !seen.insert(row.doc_id.clone()) {
                    return Err(DumpError::Invalid {
                        line: line_no,
                        message: format!("doc_id {:?} reappears after other documents", row.doc_id),
                    });
                }
                docs.push((line_no, vec![row]));
            }
        }
    }
    for (first_line, rows) in &docs {
        let doc = ScoredDoc {
            doc_id: rows[0].doc_id.clone(),
            records: rows.iter().map(DumpRow::record).collect(),
        };
        doc.validate().map_err(|message| DumpError::Invalid {
            line: *first_line,
            message: format!("document {:?}: {message}", doc.doc_id),
        })?;
    }
    Ok(docs.into_iter().map(|(_, rows)| rows).collect())
}

pub fn read_dump(path: &Path) -> Result<Vec<ScoredDoc>, DumpError> {
    Ok(read_dump_rows(path)?
        .into_iter()
        .map(|rows| ScoredDoc {
            doc_id: rows[0].doc_id.clone(),
            records: rows.iter().map(DumpRow::record).collect(),
        })
        .collect())
}
