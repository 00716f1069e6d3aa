use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use longppl::align::{project_key_tokens_hard, project_weights_soft, Segmentation};
use longppl::analysis::{correlate, AnnotateFormat, AnnotatedDoc, BenchmarkScoreTable};
use longppl::config::{filler_words, Config, ConfigError, ScorerConfig};
use longppl::metrics::{
    compute_lpg, compute_lpv, compute_soft_influence, is_key, select_key_tokens, soft_weights, summarize,
    summarize_corpus, KeyTokenMask, MetricReport,
};
use longppl::scoring::{
    read_dump, read_dump_rows, score_doc, write_dump_rows, NgramModel, RemoteScorer, ScoredDoc, Scorer,
    TokenDiagnostics, UniformScorer,
};
use longppl::synth::{answer_tokens, corpus_specs, generate_lines_text, LinesRecord};
use longppl::tokenize::{Span, TokenizedDoc, TokenizerSpec};
use longppl::train::{answer_nll, load_checkpoint, save_checkpoint, train, write_train_log, TinyLM, TrainDoc};

#[derive(Parser)]
#[command(name = "longppl", version, about = "Key-token perplexity and long-context loss toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a corpus and report PPL, LongPPL and LongPPL-soft
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// JSONL with `doc_id` and `text`
        #[arg(long)]
        corpus: PathBuf,
        /// Select key tokens from this dump instead of the evaluated scores
        #[arg(long)]
        evaluator_dump: Option<PathBuf>,
        /// Also write the per-token scores
        #[arg(long)]
        dump_out: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add key-token diagnostics to every row of a dump
    Select {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate lines retrieval tasks
    Synth {
        #[arg(long, default_value_t = 1)]
        n_docs: usize,
        #[arg(long, default_value_t = 1350)]
        n_lines: usize,
        #[arg(long, default_value_t = 5)]
        digits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target lines are drawn from the first this-many lines
        #[arg(long)]
        max_target: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tiny model with CE or LongCE
    Train {
        #[arg(long)]
        config: PathBuf,
        /// JSONL lines tasks as written by `synth`
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint path
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Pearson correlation of a metric against benchmark scores
    Correlate {
        /// JSON array of {model_name, metric_value, benchmark_score}
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Highlight key tokens of every document in a dump
    Annotate {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Ansi)]
        format: Format,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that a dump is well formed
    DumpValidate {
        #[arg(long)]
        dump: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ansi,
    Html,
}

enum CliError {
    Usage(String),
    Data(String),
}

type CliResult<T> = Result<T, CliError>;

fn data<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Data(format!("{context}: {e}"))
}

fn load_config(path: &Path) -> CliResult<Config> {
    Config::load(path).map_err(|e| match e {
        ConfigError::Io { .. } | ConfigError::Parse { .. } | ConfigError::Invalid(_) => CliError::Usage(e.to_string()),
        other => CliError::Data(other.to_string()),
    })
}

fn optional_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        Some(p) => load_config(p),
        None => Ok(Config::default()),
    }
}

#[derive(Deserialize)]
struct CorpusRow {
    doc_id: String,
    text: String,
    #[serde(default)]
    answer_span: Option<Span>,
    #[serde(default)]
    answer_value: Option<String>,
}

fn read_corpus(path: &Path) -> CliResult<Vec<CorpusRow>> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(data("corpus"))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CorpusRow =
            serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{} holds no documents", path.display())));
    }
    Ok(rows)
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> CliResult<()> {
    let mut out = output(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(data("write"))?;
    writeln!(out).and_then(|_| out.flush()).map_err(data("write"))
}

fn tokenize_all(tok: &TokenizerSpec, rows: &[CorpusRow]) -> CliResult<Vec<TokenizedDoc>> {
    rows.iter()
        .map(|r| tok.encode_doc(&r.doc_id, &r.text).map_err(data(&r.doc_id)))
        .collect()
}

fn build_scorer(cfg: &Config, tok: &TokenizerSpec, docs: &[TokenizedDoc]) -> CliResult<Box<dyn Scorer>> {
    Ok(match &cfg.scorer {
        ScorerConfig::Uniform { vocab_size } => Box::new(UniformScorer {
            vocab_size: vocab_size.unwrap_or(tok.vocab_size()),
        }),
        ScorerConfig::Ngram {
            order,
            smoothing_k,
            train_corpus,
        } => {
            let train_docs = match train_corpus {
                Some(p) => tokenize_all(tok, &read_corpus(p)?)?,
                None => docs.to_vec(),
            };
            let model = NgramModel::train(&train_docs, *order, *smoothing_k, tok.vocab_size())
                .map_err(|e| CliError::Usage(format!("ngram scorer: {e}")))?;
            Box::new(model)
        }
        ScorerConfig::Remote(remote) => {
            Box::new(RemoteScorer::from_env(remote.clone()).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        ScorerConfig::TinyLm { checkpoint } => Box::new(load_checkpoint(checkpoint).map_err(data("checkpoint"))?),
    })
}

#[derive(Serialize)]
struct DocReport {
    doc_id: String,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Serialize)]
struct EvalReport {
    corpus: MetricReport,
    docs: Vec<DocReport>,
}

fn cmd_eval(
    config: &Path,
    corpus: &Path,
    evaluator_dump: Option<&Path>,
    dump_out: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let cfg = load_config(config)?;
    let rows = read_corpus(corpus)?;
    let tok = cfg.tokenizer.build(rows.iter().map(|r| r.text.as_str())).map_err(data("tokenizer"))?;
    let docs = tokenize_all(&tok, &rows)?;
    let scorer = build_scorer(&cfg, &tok, &docs)?;
    let scored: Vec<ScoredDoc> = docs
        .par_iter()
        .map(|d| score_doc(d, scorer.as_ref(), &cfg.window).map_err(data(&d.doc_id)))
        .collect::<CliResult<_>>()?;

    let evaluator: Option<HashMap<String, ScoredDoc>> = match evaluator_dump {
        Some(p) => Some(
            read_dump(p)
                .map_err(data("evaluator dump"))?
                .into_iter()
                .map(|d| (d.doc_id.clone(), d))
                .collect(),
        ),
        None => None,
    };
    let mut selections = Vec::with_capacity(scored.len());
    for doc in &scored {
        let (mask, weights) = match &evaluator {
            None => (select_key_tokens(doc, &cfg.influence), soft_weights(doc, &cfg.influence)),
            Some(ev) => {
                let e = ev
                    .get(&doc.doc_id)
                    .ok_or_else(|| CliError::Data(format!("evaluator dump has no document {:?}", doc.doc_id)))?;
                let (from, to) = (Segmentation::from(e), Segmentation::from(doc));
                let mask = project_key_tokens_hard(&from, &select_key_tokens(e, &cfg.influence), &to)
                    .map_err(data(&doc.doc_id))?;
                let weights =
                    project_weights_soft(&from, &soft_weights(e, &cfg.influence), &to).map_err(data(&doc.doc_id))?;
                (mask, weights)
            }
        };
        selections.push((mask, weights));
    }

    let per_doc = scored
        .iter()
        .zip(&selections)
        .map(|(doc, (mask, weights))| {
            summarize_corpus(&[(doc, mask, weights.as_slice())])
                .map(|report| DocReport {
                    doc_id: doc.doc_id.clone(),
                    report,
                })
                .map_err(data(&doc.doc_id))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let pooled: Vec<(&ScoredDoc, &KeyTokenMask, &[f64])> = scored
        .iter()
        .zip(&selections)
        .map(|(d, (m, w))| (d, m, w.as_slice()))
        .collect();
    let corpus_report = summarize_corpus(&pooled).map_err(data("corpus"))?;
    if let Some(p) = dump_out {
        let w = output(Some(p))?;
        write_dump_rows(w, &scored, None).map_err(data("dump"))?;
    }
    write_json(
        out,
        &EvalReport {
            corpus: corpus_report,
            docs: per_doc,
        },
    )
}

fn cmd_select(dump: &Path, config: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let cfg = optional_config(config)?;
    let docs = read_dump(dump).map_err(data("dump"))?;
    let diagnostics: Vec<Vec<TokenDiagnostics>> = docs
        .iter()
        .map(|d| {
            d.records
                .iter()
                .map(|r| TokenDiagnostics {
                    lpg: compute_lpg(r),
                    lpv: compute_lpv(r),
                    is_key: is_key(r, &cfg.influence),
                    soft_w: compute_soft_influence(r, &cfg.influence),
                })
                .collect()
        })
        .collect();
    let w = output(out)?;
    write_dump_rows(w, &docs, Some(&diagnostics)).map_err(data("write"))?;
    let n_key: usize = diagnostics.iter().flatten().filter(|t| t.is_key).count();
    let n: usize = diagnostics.iter().map(Vec::len).sum();
    eprintln!("{n_key} key tokens out of {n} in {} documents", docs.len());
    Ok(())
}

fn cmd_synth(
    n_docs: usize,
    n_lines: usize,
    digits: usize,
    seed: u64,
    max_target: Option<usize>,
    out: Option<&Path>,
) -> CliResult<()> {
    let words = filler_words(None);
    let specs = corpus_specs(n_docs, n_lines, digits, seed, max_target.unwrap_or(n_lines), &words)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let records: Vec<LinesRecord> = specs
        .par_iter()
        .map(|spec| {
            let lt = generate_lines_text(spec).map_err(|e| CliError::Usage(e.to_string()))?;
            Ok(LinesRecord {
                doc_id: format!("lines-{}", spec.seed),
                text: lt.text,
                answer_span: lt.answer_span,
                answer_value: lt.answer_value,
            })
        })
        .collect::<CliResult<_>>()?;
    let mut w = output(out)?;
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(data("write"))?;
        writeln!(w).map_err(data("write"))?;
    }
    w.flush().map_err(data("write"))
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_loss: Option<f64>,
    answer_nll: Option<f64>,
    parameters: usize,
}

fn cmd_train(config: &Path, corpus: &Path, out: &Path, log: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(config)?;
    let rows = read_corpus(corpus)?;
    let tok = cfg.tokenizer.build(rows.iter().map(|r| r.text.as_str())).map_err(data("tokenizer"))?;
    let docs = tokenize_all(&tok, &rows)?;
    let train_docs: Vec<TrainDoc> = docs
        .iter()
        .zip(&rows)
        .map(|(doc, row)| {
            let answer = match (&row.answer_span, &row.answer_value) {
                (Some(span), Some(value)) => answer_tokens(doc, *span, value).map_err(data(&row.doc_id))?,
                _ => Vec::new(),
            };
            Ok(TrainDoc { ids: doc.ids(), answer })
        })
        .collect::<CliResult<_>>()?;
    let mut model =
        TinyLM::new(cfg.train.model.tiny_lm(tok.vocab_size())).map_err(|e| CliError::Usage(format!("model: {e}")))?;
    let steps = train(&mut model, &train_docs, &cfg.train.run).map_err(data("training"))?;
    save_checkpoint(&model, out).map_err(data("checkpoint"))?;
    if let Some(p) = log {
        write_train_log(output(Some(p))?, &steps).map_err(data("log"))?;
    }
    let labelled: Vec<TrainDoc> = train_docs.into_iter().filter(|d| !d.answer.is_empty()).collect();
    let summary = TrainSummary {
        steps: steps.len(),
        final_loss: steps.last().map(|s| s.loss),
        answer_nll: if labelled.is_empty() {
            None
        } else {
            Some(answer_nll(&model, &labelled).map_err(data("evaluation"))?)
        },
        parameters: model.params().len(),
    };
    write_json(None, &summary)
}

fn cmd_correlate(table: &Path, out: Option<&Path>) -> CliResult<()> {
    let text =
        std::fs::read_to_string(table).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", table.display())))?;
    let table: BenchmarkScoreTable = serde_json::from_str(&text).map_err(data("score table"))?;
    let report = correlate(&table).map_err(data("correlate"))?;
    write_json(out, &report)
}

fn cmd_annotate(dump: &Path, format: Format, config: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let cfg = optional_config(config)?;
    let docs = read_dump(dump).map_err(data("dump"))?;
    let format = match format {
        Format::Ansi => AnnotateFormat::Ansi,
        Format::Html => AnnotateFormat::Html,
    };
    let mut w = output(out)?;
    for doc in &docs {
        let mask = select_key_tokens(doc, &cfg.influence);
        let rendered = AnnotatedDoc::from_scored(doc, &mask)
            .and_then(|a| a.render(format))
            .map_err(data(&doc.doc_id))?;
        let written = match format {
            AnnotateFormat::Ansi => writeln!(w, "== {} ==\n{rendered}", doc.doc_id),
            AnnotateFormat::Html => writeln!(w, "<pre data-doc-id=\"{}\">{rendered}</pre>", doc.doc_id.replace('"', "&quot;")),
        };
        written.map_err(data("write"))?;
    }
    w.flush().map_err(data("write"))
}

fn cmd_dump_validate(dump: &Path) -> CliResult<()> {
    read_dump_rows(dump).map_err(data("dump"))?;
    let docs = read_dump(dump).map_err(data("dump"))?;
    for d in &docs {
        d.validate().map_err(|e| CliError::Data(format!("{}: {e}", d.doc_id)))?;
        summarize(d, &KeyTokenMask::from_flags(vec![false; d.len()]), &Default::default()).map_err(data(&d.doc_id))?;
    }
    let n: usize = docs.iter().map(ScoredDoc::len).sum();
    println!("valid: {} documents, {n} tokens", docs.len());
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Eval {
            config,
            corpus,
            evaluator_dump,
            dump_out,
            out,
        } => cmd_eval(&config, &corpus, evaluator_dump.as_deref(), dump_out.as_deref(), out.as_deref()),
        Command::Select { dump, config, out } => cmd_select(&dump, config.as_deref(), out.as_deref()),
        Command::Synth {
            n_docs,
            n_lines,
            digits,
            seed,
            max_target,
            out,
        } => cmd_synth(n_docs, n_lines, digits, seed, max_target, out.as_deref()),
        Command::Train { config, corpus, out, log } => cmd_train(&config, &corpus, &out, log.as_deref()),
        Command::Correlate { table, out } => cmd_correlate(&table, out.as_deref()),
        Command::Annotate {
            dump,
            format,
            config,
            out,
        } => cmd_annotate(&dump, format, config.as_deref(), out.as_deref()),
        Command::DumpValidate { dump } => cmd_dump_validate(&dump),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
