//! Lossless tokenizers with character-span provenance.
//!
//! Every [`Token`] records the half-open interval of Unicode scalar values it
//! covers in the source text, and its `text` is exactly that substring. Three
//! segmenters are provided so that the same text can be cut in genuinely
//! different ways:
//!
//! * byte-level: one token per UTF-8 byte, ids `0..256`;
//! * whitespace: a word together with the whitespace that follows it;
//! * bpe: greedy rank-ordered merges over characters, applied inside
//!   space-prefixed word segments.
//!
//! For a multi-byte character the byte-level tokenizer emits the leading
//! bytes as zero-width tokens (empty text, `start == end`) and attaches the
//! character itself to the final byte.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const UNK_TOKEN: &str = "<unk>";
pub const WS_TOKEN: &str = "<ws>";

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("duplicate vocabulary entry {token:?} at ids {first} and {second}")]
    DuplicateEntry {
        token: String,
        first: u32,
        second: u32,
    },
    #[error("merge rule on line {line}: {reason}")]
    BadMerge { line: usize, reason: String },
    #[error("symbol {0:?} is not in the vocabulary and there is no <unk> entry")]
    UnknownSymbol(String),
    #[error("invalid tokenized document: {0}")]
    InvalidDoc(String),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Half-open interval `[start, end)` of character (Unicode scalar) indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Characters this span stands for when projecting onto another
    /// segmentation. A zero-width span (a partial byte) stands for the
    /// character that starts at its position.
    pub fn coverage(&self, text_len: usize) -> std::ops::Range<usize> {
        if self.is_empty() {
            self.start..(self.start + 1).min(text_len)
        } else {
            self.start..self.end
        }
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub text: String,
    pub span: Span,
}

/// A document as an ordered, lossless token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub doc_id: String,
    pub source_text: String,
    pub tokens: Vec<Token>,
}

impl TokenizedDoc {
    /// Builds a document and checks that the tokens tile the source text.
    pub fn new(
        doc_id: impl Into<String>,
        source_text: impl Into<String>,
        tokens: Vec<Token>,
    ) -> Result<Self, TokenizeError> {
        let doc = TokenizedDoc {
            doc_id: doc_id.into(),
            source_text: source_text.into(),
            tokens,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), TokenizeError> {
        validate_tiling(&self.source_text, self.tokens.iter().map(|t| (t.span, t.text.as_str())))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn spans(&self) -> Vec<Span> {
        self.tokens.iter().map(|t| t.span).collect()
    }

    /// Source length in characters.
    pub fn char_len(&self) -> usize {
        self.source_text.chars().count()
    }
}

/// Checks that `(span, text)` pairs tile `source` exactly: contiguous,
/// ordered, and each text equal to the substring under its span.
pub(crate) fn validate_tiling<'a>(
    source: &str,
    tokens: impl Iterator<Item = (Span, &'a str)>,
) -> Result<(), TokenizeError> {
    let offsets = char_byte_offsets(source);
    let n_chars = offsets.len() - 1;
    let mut cursor = 0usize;
    for (i, (span, text)) in tokens.enumerate() {
        if span.start != cursor {
            return Err(TokenizeError::InvalidDoc(format!(
                "token {i} starts at {} but previous token ended at {cursor}",
                span.start
            )));
        }
        if span.end < span.start || span.end > n_chars {
            return Err(TokenizeError::InvalidDoc(format!("token {i} has bad span {span}")));
        }
        let expected = &source[offsets[span.start]..offsets[span.end]];
        if expected != text {
            return Err(TokenizeError::InvalidDoc(format!(
                "token {i} text {text:?} differs from source {expected:?} at {span}"
            )));
        }
        cursor = span.end;
    }
    if cursor != n_chars {
        return Err(TokenizeError::InvalidDoc(format!(
            "tokens cover {cursor} of {n_chars} characters"
        )));
    }
    Ok(())
}

/// Byte offset of every character start, plus the total byte length.
pub(crate) fn char_byte_offsets(text: &str) -> Vec<usize> {
    let mut offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    offsets.push(text.len());
    offsets
}

/// Concatenation of token texts.
pub fn decode(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.text.as_str()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    ByteLevel,
    Whitespace,
    Bpe,
}

/// Bijective id ↔ string table.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_entries(entries: Vec<String>) -> Result<Self, TokenizeError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (id, entry) in entries.iter().enumerate() {
            if let Some(first) = index.insert(entry.clone(), id as u32) {
                return Err(TokenizeError::DuplicateEntry {
                    token: entry.clone(),
                    first,
                    second: id as u32,
                });
            }
        }
        Ok(Vocab { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }
}

/// A validated tokenizer definition. Immutable once built.
#[derive(Clone, Debug)]
pub struct TokenizerSpec {
    kind: TokenizerKind,
    vocab: Vocab,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl TokenizerSpec {
    pub fn byte_level() -> Self {
        let entries = (0u32..256)
            .map(|b| {
                if b < 128 {
                    char::from(b as u8).to_string()
                } else {
                    format!("<0x{b:02X}>")
                }
            })
            .collect();
        TokenizerSpec {
            kind: TokenizerKind::ByteLevel,
            vocab: Vocab::from_entries(entries).expect("byte vocabulary is unique"),
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Whitespace tokenizer over a fixed word list. Ids 0 and 1 are reserved
    /// for `<unk>` and for a leading whitespace run.
    pub fn whitespace<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<&str> = words
            .into_iter()
            .filter(|w| !w.is_empty() && *w != UNK_TOKEN && *w != WS_TOKEN)
            .collect();
        words.sort_unstable();
        words.dedup();
        let entries = [UNK_TOKEN, WS_TOKEN]
            .into_iter()
            .chain(words)
            .map(str::to_owned)
            .collect();
        TokenizerSpec {
            kind: TokenizerKind::Whitespace,
            vocab: Vocab::from_entries(entries).expect("deduplicated above"),
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    /// Whitespace tokenizer whose vocabulary is every word seen in `texts`.
    pub fn whitespace_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: Vec<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        Self::whitespace(words)
    }

    /// BPE tokenizer. Every merge operand and every merge result must be a
    /// vocabulary entry; merge priority is list order.
    pub fn bpe(vocab: Vocab, merges: Vec<(String, String)>) -> Result<Self, TokenizeError> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let line = rank + 1;
            for part in [a, b] {
                if vocab.id(part).is_none() {
                    return Err(TokenizeError::BadMerge {
                        line,
                        reason: format!("operand {part:?} is not in the vocabulary"),
                    });
                }
            }
            let merged = format!("{a}{b}");
            if vocab.id(&merged).is_none() {
                return Err(TokenizeError::BadMerge {
                    line,
                    reason: format!("result {merged:?} is not in the vocabulary"),
                });
            }
            if ranks.insert((a.clone(), b.clone()), rank).is_some() {
                return Err(TokenizeError::BadMerge {
                    line,
                    reason: format!("pair ({a:?}, {b:?}) is listed twice"),
                });
            }
        }
        Ok(TokenizerSpec {
            kind: TokenizerKind::Bpe,
            vocab,
            merges,
            ranks,
        })
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn encode(&self, text: &str) -> Result<TokenizedDoc, TokenizeError> {
        self.encode_doc("", text)
    }

    pub fn encode_doc(&self, doc_id: &str, text: &str) -> Result<TokenizedDoc, TokenizeError> {
        let tokens = match self.kind {
            TokenizerKind::ByteLevel => encode_bytes(text),
            TokenizerKind::Whitespace => self.encode_whitespace(text),
            TokenizerKind::Bpe => self.encode_bpe(text)?,
        };
        Ok(TokenizedDoc {
            doc_id: doc_id.to_owned(),
            source_text: text.to_owned(),
            tokens,
        })
    }

    fn lookup_or_unk(&self, symbol: &str) -> Result<u32, TokenizeError> {
        self.vocab
            .id(symbol)
            .or_else(|| self.vocab.id(UNK_TOKEN))
            .ok_or_else(|| TokenizeError::UnknownSymbol(symbol.to_owned()))
    }

    fn encode_whitespace(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let unk = self.vocab.id(UNK_TOKEN).unwrap_or(0);
        let mut tokens = Vec::new();
        let mut pos = 0;
        let lead = chars.iter().take_while(|c| c.is_whitespace()).count();
        if lead > 0 {
            tokens.push(Token {
                id: self.vocab.id(WS_TOKEN).unwrap_or(unk),
                text: chars[..lead].iter().collect(),
                span: Span::new(0, lead),
            });
            pos = lead;
        }
        while pos < chars.len() {
            let word_end = pos + chars[pos..].iter().take_while(|c| !c.is_whitespace()).count();
            let end = word_end + chars[word_end..].iter().take_while(|c| c.is_whitespace()).count();
            let word: String = chars[pos..word_end].iter().collect();
            tokens.push(Token {
                id: self.vocab.id(&word).unwrap_or(unk),
                text: chars[pos..end].iter().collect(),
                span: Span::new(pos, end),
            });
            pos = end;
        }
        tokens
    }

    fn encode_bpe(&self, text: &str) -> Result<Vec<Token>, TokenizeError> {
        let chars: Vec<char> = text.chars().collect();
        let mut tokens = Vec::new();
        for seg in pre_tokenize(&chars) {
            let mut symbols: Vec<String> = chars[seg.clone()].iter().map(|c| c.to_string()).collect();
            self.apply_merges(&mut symbols);
            let mut start = seg.start;
            for sym in symbols {
                let end = start + sym.chars().count();
                tokens.push(Token {
                    id: self.lookup_or_unk(&sym)?,
                    text: sym,
                    span: Span::new(start, end),
                });
                start = end;
            }
        }
        Ok(tokens)
    }

    fn apply_merges(&self, symbols: &mut Vec<String>) {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = merged;
        }
    }
}

fn encode_bytes(text: &str) -> Vec<Token> {
    let mut tokens = Vec::with_capacity(text.len());
    for (ci, ch) in text.chars().enumerate() {
        let mut buf = [0u8; 4];
        let bytes = ch.encode_utf8(&mut buf).as_bytes();
        let last = bytes.len() - 1;
        for (k, &b) in bytes.iter().enumerate() {
            if k < last {
                tokens.push(Token {
                    id: b as u32,
                    text: String::new(),
                    span: Span::new(ci, ci),
                });
            } else {
                tokens.push(Token {
                    id: b as u32,
                    text: ch.to_string(),
                    span: Span::new(ci, ci + 1),
                });
            }
        }
    }
    tokens
}

/// Splits characters into segments: words carry one leading space when the
/// preceding whitespace run ends in `' '`; other whitespace stands alone.
fn pre_tokenize(chars: &[char]) -> Vec<std::ops::Range<usize>> {
    let mut segs = Vec::new();
    let mut pos = 0;
    while pos < chars.len() {
        if chars[pos].is_whitespace() {
            let end = pos + chars[pos..].iter().take_while(|c| c.is_whitespace()).count();
            let glue = end < chars.len() && chars[end - 1] == ' ';
            let ws_end = if glue { end - 1 } else { end };
            if ws_end > pos {
                segs.push(pos..ws_end);
            }
            if glue {
                let word_end = end + chars[end..].iter().take_while(|c| !c.is_whitespace()).count();
                segs.push(ws_end..word_end);
                pos = word_end;
            } else {
                pos = end;
            }
        } else {
            let end = pos + chars[pos..].iter().take_while(|c| !c.is_whitespace()).count();
            segs.push(pos..end);
            pos = end;
        }
    }
    segs
}

/// Escapes a token for the line-oriented vocabulary and merges files.
pub fn escape_token(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for c in token.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_token(raw: &str) -> Result<String, String> {
    let mut out = String::with_capacity(raw.len());
    let mut chars = raw.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('s') => out.push(' '),
            Some(other) => return Err(format!("unknown escape \\{other}")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

fn read_lines(path: &Path) -> Result<Vec<String>, TokenizeError> {
    let text = fs::read_to_string(path).map_err(|source| TokenizeError::Io {
        path: path.to_owned(),
        source,
    })?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Loads a BPE tokenizer from a vocabulary file (one escaped token per line,
/// line number = id) and a merges file (one space-separated escaped pair per
/// line, earlier lines merge first).
pub fn load_bpe(vocab_file: &Path, merges_file: &Path) -> Result<TokenizerSpec, TokenizeError> {
    let mut entries = Vec::new();
    for (i, line) in read_lines(vocab_file)?.iter().enumerate() {
        let entry = unescape_token(line).map_err(|reason| TokenizeError::Parse {
            path: vocab_file.to_owned(),
            line: i + 1,
            reason,
        })?;
        entries.push(entry);
    }
    let vocab = Vocab::from_entries(entries)?;
    let mut merges = Vec::new();
    for (i, line) in read_lines(merges_file)?.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |reason: String| TokenizeError::Parse {
            path: merges_file.to_owned(),
            line: i + 1,
            reason,
        };
        let mut parts = line.split(' ');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(format!("expected two space-separated tokens, got {line:?}")));
        };
        merges.push((unescape_token(a).map_err(parse_err)?, unescape_token(b).map_err(parse_err)?));
    }
    TokenizerSpec::bpe(vocab, merges)
}

/// Writes the two files read by [`load_bpe`].
pub fn save_bpe(spec: &TokenizerSpec, vocab_file: &Path, merges_file: &Path) -> std::io::Result<()> {
    let vocab: String = spec
        .vocab
        .entries()
        .iter()
        .map(|e| escape_token(e) + "\n")
        .collect();
    fs::write(vocab_file, vocab)?;
    let merges: String = spec
        .merges
        .iter()
        .map(|(a, b)| format!("{} {}\n", escape_token(a), escape_token(b)))
        .collect();
    fs::write(merges_file, merges)
}
