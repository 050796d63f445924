//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::pipeline::{
    disassemble_external, embed_query, embed_translations, evaluate_records, load_checkpoint, load_rules,
    load_vocabularies, prepare_records, read_corpus, save_checkpoint, train_on_records, translate_disassembly,
    Checkpoint, PipelineError, ToolConfig, Vocabularies,
};
use crate::retrieval::{SearchIndex, DEFAULT_CUTOFF};
use crate::trainer::{TrainConfig, WordMapping};
use crate::translator::{export_graph, GraphFormat};

#[derive(Debug, Parser)]
#[command(
    name = "stacktrans",
    version,
    about = "Translate bytecode to text and search code by comment"
)]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Rule file; the shipped rules are used when omitted.
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    /// Cache directory for external compilation.
    #[arg(long, global = true, default_value = ".stacktrans-cache")]
    work_dir: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GraphArg {
    Dot,
    Json,
}

#[derive(Debug, clap::Args)]
struct VocabArgs {
    /// Vocabulary file (the translation vocabulary with --comment-vocab).
    #[arg(long)]
    vocab: PathBuf,
    /// Comment vocabulary for separate word mappings.
    #[arg(long)]
    comment_vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Print one sentence per instruction, or the dependency graph.
    Translate {
        #[arg(long = "in")]
        input: PathBuf,
        /// Treat the input as Java source and compile it first.
        #[arg(long)]
        source: bool,
        #[arg(long, value_enum)]
        graph: Option<GraphArg>,
    },
    /// Build vocabulary file(s) from a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write a separate comment vocabulary here.
        #[arg(long)]
        comment_out: Option<PathBuf>,
        #[arg(long, default_value_t = 15_000)]
        size: usize,
    },
    /// Train both encoders and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch `epoch<TAB>train<TAB>validation` lines.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Embed every corpus translation into a search index.
    Index {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed snippets against a natural-language query.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long)]
        query: String,
        #[arg(short = 'k', default_value_t = 10)]
        k: usize,
    },
    /// Distractor evaluation over a test corpus.
    Evaluate {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: usize,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn cli_dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn load_verified(
    checkpoint: &Path,
    vocab: &VocabArgs,
    rules: &crate::ruleset::RuleSet,
) -> Result<(Checkpoint, Vocabularies), PipelineError> {
    let cp = load_checkpoint(checkpoint)?;
    let vocabs = load_vocabularies(&vocab.vocab, vocab.comment_vocab.as_deref())?;
    cp.verify(&vocabs, rules)?;
    Ok((cp, vocabs))
}

fn prepare(
    corpus: &Path,
    rules: &crate::ruleset::RuleSet,
    work_dir: &Path,
) -> Result<Vec<crate::pipeline::PreparedRecord>, PipelineError> {
    let corpus = read_corpus(corpus)?;
    let tools = ToolConfig::from_env();
    let needs_tools = corpus.records.iter().any(|r| r.disassembly.is_none());
    let tools = (needs_tools && tools.available()).then_some((&tools, work_dir));
    if needs_tools && tools.is_none() {
        log::warn!("compiler/disassembler unavailable; records without a disassembly are skipped");
    }
    if let Some((_, dir)) = tools {
        fs::create_dir_all(dir)?;
    }
    let (records, skips) = prepare_records(&corpus.records, rules, tools)?;
    if corpus.skipped + skips.total() > 0 {
        log::warn!(
            "skipped {} malformed lines, {} without disassembly, {} failed to compile, {} untranslatable, {} empty",
            corpus.skipped,
            skips.no_disassembly,
            skips.compile_failed,
            skips.untranslatable,
            skips.empty
        );
    }
    Ok(records)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<(), PipelineError> {
    let rules = load_rules(cli.rules.as_deref())?;
    match cli.command {
        Cmd::Translate { input, source, graph } => {
            let text = fs::read_to_string(&input).map_err(|source| PipelineError::FileUnreadable {
                path: input.clone(),
                source,
            })?;
            let disassembly = if source {
                fs::create_dir_all(&cli.work_dir)?;
                disassemble_external(&text, &cli.work_dir, &ToolConfig::from_env())?
            } else {
                text
            };
            let translations = translate_disassembly(&disassembly, &rules)?;
            for t in &translations {
                match graph {
                    Some(GraphArg::Dot) => write!(out, "{}", export_graph(t, GraphFormat::Dot))?,
                    Some(GraphArg::Json) => writeln!(out, "{}", export_graph(t, GraphFormat::Json))?,
                    None => {
                        if translations.len() > 1 {
                            writeln!(out, "# {}", t.method_id)?;
                        }
                        write!(out, "{}", t.listing())?;
                    }
                }
            }
        }
        Cmd::BuildVocab {
            corpus,
            out: path,
            comment_out,
            size,
        } => {
            let records = prepare(&corpus, &rules, &cli.work_dir)?;
            let mapping = if comment_out.is_some() {
                WordMapping::Separate
            } else {
                WordMapping::Shared
            };
            match Vocabularies::build(&records, mapping, size)? {
                Vocabularies::Shared(v) => fs::write(&path, v.to_text())?,
                Vocabularies::Separate { translation, comment } => {
                    fs::write(&path, translation.to_text())?;
                    fs::write(comment_out.expect("separate implies a comment path"), comment.to_text())?;
                }
            }
            writeln!(out, "wrote vocabulary for {} records", records.len())?;
        }
        Cmd::Train {
            corpus,
            vocab,
            out: path,
            log,
            epochs,
            embed_dim,
            hidden_dim,
            batch_size,
            learning_rate,
            margin,
            dropout,
        } => {
            let records = prepare(&corpus, &rules, &cli.work_dir)?;
            let vocabs = load_vocabularies(&vocab.vocab, vocab.comment_vocab.as_deref())?;
            let d = TrainConfig::default();
            let config = TrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                embed_dim: embed_dim.unwrap_or(d.embed_dim),
                hidden_dim: hidden_dim.unwrap_or(d.hidden_dim),
                batch_size: batch_size.unwrap_or(d.batch_size),
                learning_rate: learning_rate.unwrap_or(d.learning_rate),
                margin: margin.unwrap_or(d.margin),
                dropout: dropout.unwrap_or(d.dropout),
                vocab_size: vocabs.translation().len().max(3),
                word_mapping: vocabs.mapping(),
                seed: cli.seed,
                ..d
            };
            let mut lines = String::new();
            let trained = train_on_records(&config, &records, Some(vocabs), &rules, |e| {
                log::info!("{e}");
                lines.push_str(&format!("{e}\n"));
            })?;
            if let Some(log) = log {
                fs::write(log, lines)?;
            }
            save_checkpoint(&trained.checkpoint, &path)?;
            writeln!(
                out,
                "trained {} epochs, selected epoch {}",
                trained.log.len(),
                trained.best_epoch
            )?;
        }
        Cmd::Index {
            corpus,
            checkpoint,
            vocab,
            out: path,
        } => {
            let (cp, vocabs) = load_verified(&checkpoint, &vocab, &rules)?;
            let records = prepare(&corpus, &rules, &cli.work_dir)?;
            let vectors = embed_translations(&cp.state.model, &vocabs, &records)?;
            let index = SearchIndex::build(records.iter().map(|r| r.id.clone()).zip(vectors).collect())?;
            let mut file = fs::File::create(&path)?;
            index.write_to(&mut file, &cp.vocab_checksums[0], &cp.rules_checksum)?;
            writeln!(out, "indexed {} snippets", index.len())?;
        }
        Cmd::Search {
            index,
            checkpoint,
            vocab,
            query,
            k,
        } => {
            let mut file =
                fs::File::open(&index).map_err(|_| PipelineError::NotFound(format!("index {}", index.display())))?;
            let loaded = SearchIndex::read_from(&mut file)?;
            let (cp, vocabs) = load_verified(&checkpoint, &vocab, &rules)?;
            if loaded.vocab_checksum != cp.vocab_checksums[0] || loaded.rules_checksum != cp.rules_checksum {
                return Err(PipelineError::ChecksumMismatch(
                    "index was built with other artifacts".into(),
                ));
            }
            let q = embed_query(&cp.state.model, &vocabs, &query)?;
            for r in loaded.index.search(&q, k)? {
                writeln!(out, "{}\t{}\t{:.6}", r.rank, r.snippet_id, r.score)?;
            }
        }
        Cmd::Evaluate {
            test,
            checkpoint,
            vocab,
            cutoff,
        } => {
            let (cp, vocabs) = load_verified(&checkpoint, &vocab, &rules)?;
            let records = prepare(&test, &rules, &cli.work_dir)?;
            let outcome = evaluate_records(&cp.state.model, &vocabs, &records, cutoff)?;
            write!(out, "{}", outcome.report())?;
        }
    }
    Ok(())
}
