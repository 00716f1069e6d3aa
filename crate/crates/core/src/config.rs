//! Single JSON document configuring every stage. All sections are optional.
//!
//! ```json
//! {
//!   "tokenizer": {"kind": "bpe", "vocab": "vocab.txt", "merges": "merges.txt"},
//!   "scorer": {"kind": "ngram", "order": 3, "smoothing_k": 0.1},
//!   "window": {"k": 4096, "d": 1024},
//!   "influence": {"alpha": 2.0, "beta": -2.0, "gamma": 5.0},
//!   "train": {"model": {"embedding_dim": 32}, "run": {"loss_kind": "LongCE", "learning_rate": 0.2, "steps": 800, "batch_size": 4}}
//! }
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::InfluenceConfig;
use crate::scoring::{RemoteConfig, WindowConfig};
use crate::synth::DEFAULT_FILLER;
use crate::tokenize::{load_bpe, TokenizeError, TokenizerSpec};
use crate::train::{LossKind, TinyLMConfig, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizeError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TokenizerConfig {
    #[default]
    ByteLevel,
    /// Word list file, one word per line; without it the vocabulary is
    /// built from the input texts.
    Whitespace {
        #[serde(default)]
        vocab: Option<PathBuf>,
    },
    Bpe {
        vocab: PathBuf,
        merges: PathBuf,
    },
    /// The vocabulary used for generated lines tasks.
    Lines {
        #[serde(default)]
        filler_vocab: Option<Vec<String>>,
    },
}

impl TokenizerConfig {
    pub fn build<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<TokenizerSpec, ConfigError> {
        Ok(match self {
            TokenizerConfig::ByteLevel => TokenizerSpec::byte_level(),
            TokenizerConfig::Whitespace { vocab: None } => TokenizerSpec::whitespace_from_texts(texts),
            TokenizerConfig::Whitespace { vocab: Some(path) } => {
                let words = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                TokenizerSpec::whitespace(words.lines().filter(|w| !w.is_empty()))
            }
            TokenizerConfig::Bpe { vocab, merges } => load_bpe(vocab, merges)?,
            TokenizerConfig::Lines { filler_vocab } => crate::synth::lines_tokenizer(&filler_words(filler_vocab.as_deref())),
        })
    }
}

pub fn filler_words(custom: Option<&[String]>) -> Vec<String> {
    match custom {
        Some(words) => words.to_vec(),
        None => DEFAULT_FILLER.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScorerConfig {
    Uniform {
        #[serde(default)]
        vocab_size: Option<usize>,
    },
    /// Trained on `train_corpus` (JSONL with a `text` field), or on the
    /// evaluated corpus itself when absent.
    Ngram {
        order: usize,
        smoothing_k: f64,
        #[serde(default)]
        train_corpus: Option<PathBuf>,
    },
    Remote(RemoteConfig),
    TinyLm {
        checkpoint: PathBuf,
    },
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig::Ngram {
            order: 3,
            smoothing_k: 0.1,
            train_corpus: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "ModelSection::default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "ModelSection::default_dim")]
    pub hidden_dim: usize,
    #[serde(default = "ModelSection::default_context")]
    pub context_window: usize,
    #[serde(default = "ModelSection::default_summary")]
    pub summary_window: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSection {
    fn default_dim() -> usize {
        32
    }

    fn default_context() -> usize {
        256
    }

    fn default_summary() -> usize {
        16
    }

    pub fn tiny_lm(&self, vocab_size: usize) -> TinyLMConfig {
        TinyLMConfig {
            vocab_size,
            context_window: self.context_window,
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            summary_window: self.summary_window,
            seed: self.seed,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default = "TrainSection::default_run")]
    pub run: TrainConfig,
}

impl TrainSection {
    pub fn default_run() -> TrainConfig {
        let mut run = TrainConfig::new(LossKind::LongCe, 0.2, 800, 4);
        run.momentum = 0.9;
        run.grad_clip = Some(5.0);
        run.param_ema = Some(0.99);
        run
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            model: ModelSection::default(),
            run: Self::default_run(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub tokenizer: TokenizerConfig,
    pub scorer: ScorerConfig,
    pub window: WindowConfig,
    pub influence: InfluenceConfig,
    pub train: TrainSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg: Config = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.window.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.influence.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.tokenizer {
            TokenizerConfig::Whitespace { vocab: Some(p) } => fix(p),
            TokenizerConfig::Bpe { vocab, merges } => {
                fix(vocab);
                fix(merges);
            }
            _ => {}
        }
        match &mut self.scorer {
            ScorerConfig::Ngram { train_corpus: Some(p), .. } => fix(p),
            ScorerConfig::TinyLm { checkpoint } => fix(checkpoint),
            _ => {}
        }
    }
}
