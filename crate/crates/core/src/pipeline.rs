//! Corpus ingestion, the external compiler/disassembler driver, checkpoint
//! files and the end-to-end helpers behind the command line.

use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::disasm::{parse_disassembly, DisasmError};
use crate::encoder::MAX_SEQ_LEN;
use crate::retrieval::{evaluate_distractor_protocol, EvalOutcome, RetrievalError};
use crate::ruleset::{RuleError, RuleSet};
use crate::text::{build_shared_vocabulary, build_vocabulary, map_tokens, tokenize, TextError, TokenSeq, Vocabulary};
use crate::trainer::{
    train, EpochLog, Model, OptimizerState, TrainConfig, TrainError, TrainState, TrainingPair, WordMapping,
};
use crate::translator::{translate_method, TranslateError, Translation, SENTENCE_BOUNDARY};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const JAVAC_ENV: &str = "STACKTRANS_JAVAC";
pub const JAVAP_ENV: &str = "STACKTRANS_JAVAP";
/// Class name used when a bare method is wrapped for compilation.
pub const WRAPPER_CLASS: &str = "Snippet";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable { path: PathBuf, source: io::Error },
    #[error("no valid records in {0}")]
    NoValidRecords(PathBuf),
    #[error("compilation failed: {0}")]
    CompileFailed(String),
    #[error("external tool `{0}` not found")]
    ToolMissing(String),
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Disasm(#[from] DisasmError),
    #[error(transparent)]
    Translate(#[from] TranslateError),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

fn read_file(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|source| PipelineError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub code: String,
    pub comment: String,
    pub disassembly: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    /// Lines skipped for missing or malformed fields.
    pub skipped: usize,
}

/// Reads one JSON object per line with `code` and `docstring` fields and
/// optional `id` (defaulting to the 1-based line number) and `disassembly`.
pub fn read_corpus(path: &Path) -> Result<Corpus, PipelineError> {
    let file = fs::File::open(path).map_err(|source| PipelineError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, i + 1) {
            Some(r) => records.push(r),
            None => {
                log::warn!("{}:{}: skipping record without code/docstring", path.display(), i + 1);
                skipped += 1;
            }
        }
    }
    if records.is_empty() {
        return Err(PipelineError::NoValidRecords(path.to_path_buf()));
    }
    Ok(Corpus { records, skipped })
}

fn parse_record(line: &str, line_no: usize) -> Option<CorpusRecord> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    let code = v.get("code")?.as_str()?.to_string();
    let comment = v.get("docstring")?.as_str()?.to_string();
    if comment.trim().is_empty() {
        return None;
    }
    let id = match v.get("id") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        _ => line_no.to_string(),
    };
    let disassembly = v.get("disassembly").and_then(|d| d.as_str()).map(str::to_string);
    Some(CorpusRecord {
        id,
        code,
        comment,
        disassembly,
    })
}

/// Paths of the external compiler and disassembler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolConfig {
    pub javac: PathBuf,
    pub javap: PathBuf,
}

impl ToolConfig {
    /// Reads `STACKTRANS_JAVAC` / `STACKTRANS_JAVAP`, defaulting to the
    /// tools on `PATH`.
    pub fn from_env() -> Self {
        let get =
            |key: &str, default: &str| std::env::var_os(key).map_or_else(|| PathBuf::from(default), PathBuf::from);
        Self {
            javac: get(JAVAC_ENV, "javac"),
            javap: get(JAVAP_ENV, "javap"),
        }
    }

    /// Whether both tools can be started.
    pub fn available(&self) -> bool {
        [&self.javac, &self.javap]
            .iter()
            .all(|t| Command::new(t).arg("-version").output().is_ok())
    }
}

static TYPE_DECL_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(?:class|interface|enum|record)\s+([A-Za-z_$][\w$]*)").unwrap());

/// Class name and compilable source; a bare method is wrapped in a class.
pub fn wrap_source(code: &str) -> (String, String) {
    match TYPE_DECL_RE.captures(code) {
        Some(c) => (c[1].to_string(), code.to_string()),
        None => (
            WRAPPER_CLASS.to_string(),
            format!("public class {WRAPPER_CLASS} {{\n{code}\n}}\n"),
        ),
    }
}

fn run_tool(tool: &Path, args: &[&std::ffi::OsStr]) -> Result<std::process::Output, PipelineError> {
    Command::new(tool).args(args).output().map_err(|e| match e.kind() {
        io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => {
            PipelineError::ToolMissing(tool.display().to_string())
        }
        _ => PipelineError::Io(e),
    })
}

/// Compiles `code` with debug information and returns the verbose
/// disassembly of its class. Results are cached in `work_dir` by the
/// SHA-256 of the code, so identical code never runs the tools twice.
pub fn disassemble_external(code: &str, work_dir: &Path, tools: &ToolConfig) -> Result<String, PipelineError> {
    let key = hex::encode(Sha256::digest(code.as_bytes()));
    let cached = work_dir.join(format!("{key}.javap"));
    if let Ok(text) = fs::read_to_string(&cached) {
        return Ok(text);
    }
    let (class, source) = wrap_source(code);
    let dir = work_dir.join(&key);
    fs::create_dir_all(&dir)?;
    let file = dir.join(format!("{class}.java"));
    fs::write(&file, source)?;

    let out = run_tool(
        &tools.javac,
        &["-g".as_ref(), "-d".as_ref(), dir.as_os_str(), file.as_os_str()],
    )?;
    if !out.status.success() {
        return Err(PipelineError::CompileFailed(
            String::from_utf8_lossy(&out.stderr).into_owned(),
        ));
    }
    let out = run_tool(
        &tools.javap,
        &[
            "-c".as_ref(),
            "-l".as_ref(),
            "-p".as_ref(),
            "-v".as_ref(),
            "-cp".as_ref(),
            dir.as_os_str(),
            class.as_ref(),
        ],
    )?;
    if !out.status.success() {
        return Err(PipelineError::CompileFailed(format!(
            "disassembler: {}",
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    let tmp = work_dir.join(format!("{key}.javap.tmp"));
    fs::write(&tmp, &text)?;
    fs::rename(&tmp, &cached)?;
    Ok(text)
}

/// Translates every method of a disassembly except default constructors.
pub fn translate_disassembly(text: &str, rules: &RuleSet) -> Result<Vec<Translation>, PipelineError> {
    parse_disassembly(text)?
        .iter()
        .filter(|m| !m.is_default_constructor())
        .map(|m| translate_method(m, rules).map_err(PipelineError::from))
        .collect()
}

/// The sentence streams of several methods joined into one text.
pub fn translation_text(translations: &[Translation]) -> String {
    translations
        .iter()
        .map(Translation::text_stream)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(&format!(" {SENTENCE_BOUNDARY} "))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedRecord {
    pub id: String,
    pub translation: TokenSeq,
    pub comment: TokenSeq,
}

/// Counts of records dropped during preparation, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipCounts {
    pub no_disassembly: usize,
    pub compile_failed: usize,
    pub untranslatable: usize,
    pub empty: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.no_disassembly + self.compile_failed + self.untranslatable + self.empty
    }
}

/// Translates and tokenizes records in input order. Records without a
/// disassembly are compiled with `tools` when given, otherwise skipped.
pub fn prepare_records(
    records: &[CorpusRecord],
    rules: &RuleSet,
    tools: Option<(&ToolConfig, &Path)>,
) -> Result<(Vec<PreparedRecord>, SkipCounts), PipelineError> {
    let mut out = Vec::with_capacity(records.len());
    let mut skips = SkipCounts::default();
    for r in records {
        let disassembly = match (&r.disassembly, tools) {
            (Some(d), _) => d.clone(),
            (None, Some((tools, dir))) => match disassemble_external(&r.code, dir, tools) {
                Ok(d) => d,
                Err(PipelineError::CompileFailed(msg)) => {
                    log::warn!(
                        "record {}: {}",
                        r.id,
                        msg.lines().next().unwrap_or("compilation failed")
                    );
                    skips.compile_failed += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
            (None, None) => {
                skips.no_disassembly += 1;
                continue;
            }
        };
        let translations = match translate_disassembly(&disassembly, rules) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("record {}: {e}", r.id);
                skips.untranslatable += 1;
                continue;
            }
        };
        let translation = tokenize(&translation_text(&translations));
        let comment = tokenize(&r.comment);
        if translation.is_empty() || comment.is_empty() {
            skips.empty += 1;
            continue;
        }
        out.push(PreparedRecord {
            id: r.id.clone(),
            translation,
            comment,
        });
    }
    Ok((out, skips))
}

/// One vocabulary for both sides, or one per side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Vocabularies {
    Shared(Vocabulary),
    Separate {
        translation: Vocabulary,
        comment: Vocabulary,
    },
}

impl Vocabularies {
    pub fn build(records: &[PreparedRecord], mapping: WordMapping, size: usize) -> Result<Self, PipelineError> {
        let t: Vec<TokenSeq> = records.iter().map(|r| r.translation.clone()).collect();
        let c: Vec<TokenSeq> = records.iter().map(|r| r.comment.clone()).collect();
        Ok(match mapping {
            WordMapping::Shared => Vocabularies::Shared(build_shared_vocabulary(&t, &c, size)?),
            WordMapping::Separate => Vocabularies::Separate {
                translation: build_vocabulary(&t, size)?,
                comment: build_vocabulary(&c, size)?,
            },
        })
    }

    pub fn mapping(&self) -> WordMapping {
        match self {
            Vocabularies::Shared(_) => WordMapping::Shared,
            Vocabularies::Separate { .. } => WordMapping::Separate,
        }
    }

    pub fn translation(&self) -> &Vocabulary {
        match self {
            Vocabularies::Shared(v) => v,
            Vocabularies::Separate { translation, .. } => translation,
        }
    }

    pub fn comment(&self) -> &Vocabulary {
        match self {
            Vocabularies::Shared(v) => v,
            Vocabularies::Separate { comment, .. } => comment,
        }
    }

    /// In model order: the shared one, or translation then comment.
    pub fn as_list(&self) -> Vec<&Vocabulary> {
        match self {
            Vocabularies::Shared(v) => vec![v],
            Vocabularies::Separate { translation, comment } => vec![translation, comment],
        }
    }

    pub fn checksums(&self) -> Vec<[u8; 32]> {
        self.as_list().iter().map(|v| v.checksum()).collect()
    }
}

fn truncated(mut ids: Vec<u32>) -> Vec<u32> {
    ids.truncate(MAX_SEQ_LEN);
    ids
}

pub fn training_pairs(records: &[PreparedRecord], vocabs: &Vocabularies) -> Vec<TrainingPair> {
    records
        .iter()
        .map(|r| TrainingPair {
            snippet_id: r.id.clone(),
            translation_ids: truncated(map_tokens(vocabs.translation(), &r.translation)),
            comment_ids: truncated(map_tokens(vocabs.comment(), &r.comment)),
        })
        .collect()
}

/// Everything needed to resume or serve a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab_checksums: Vec<[u8; 32]>,
    pub rules_checksum: [u8; 32],
    pub state: TrainState,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    vocab_checksums: Vec<String>,
    rules_checksum: String,
    epoch: usize,
    optimizer_step: u64,
    /// (rows, dim) per embedding matrix
    embeddings: Vec<(usize, usize)>,
    /// (input_dim, hidden_dim) of the comment and translation encoders
    encoders: [(usize, usize); 2],
}

impl Checkpoint {
    /// Refuses artifacts that differ from those used at training time.
    pub fn verify(&self, vocabs: &Vocabularies, rules: &RuleSet) -> Result<(), PipelineError> {
        if vocabs.checksums() != self.vocab_checksums {
            return Err(PipelineError::ChecksumMismatch(
                "vocabulary differs from training time".into(),
            ));
        }
        if rules.checksum() != self.rules_checksum {
            return Err(PipelineError::ChecksumMismatch(
                "rule set differs from training time".into(),
            ));
        }
        Ok(())
    }

    /// Magic, version, header length and JSON header, then every tensor as
    /// little-endian f32 (model, first moments, second moments) and a
    /// trailing SHA-256 of all preceding bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.state.model;
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocab_checksums: self.vocab_checksums.iter().map(hex::encode).collect(),
            rules_checksum: hex::encode(self.rules_checksum),
            epoch: self.state.epoch,
            optimizer_step: self.state.optimizer.step,
            embeddings: model.embeddings.iter().map(|e| (e.rows, e.dim)).collect(),
            encoders: [
                (model.comment_encoder.input_dim, model.comment_encoder.hidden_dim),
                (
                    model.translation_encoder.input_dim,
                    model.translation_encoder.hidden_dim,
                ),
            ],
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for m in [model, &self.state.optimizer.first, &self.state.optimizer.second] {
            for t in m.tensors() {
                for x in t {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let corrupt = |m: &str| PipelineError::CorruptFile(m.to_string());
        if bytes.len() < 16 + 32 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)"));
        }
        let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(16..16usize.saturating_add(header_len))
            .ok_or_else(|| corrupt("header truncated"))?;
        let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;

        let decode_sum = |s: &str| -> Result<[u8; 32], PipelineError> {
            hex::decode(s)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| corrupt("bad checksum field"))
        };
        let vocab_checksums = header
            .vocab_checksums
            .iter()
            .map(|s| decode_sum(s))
            .collect::<Result<Vec<_>, _>>()?;
        let rules_checksum = decode_sum(&header.rules_checksum)?;

        let expected_matrices = match header.config.word_mapping {
            WordMapping::Shared => 1,
            WordMapping::Separate => 2,
        };
        if header.embeddings.len() != expected_matrices {
            return Err(corrupt("embedding count does not match word mapping"));
        }
        let template = Model {
            mapping: header.config.word_mapping,
            embeddings: header
                .embeddings
                .iter()
                .map(|&(r, d)| crate::text::EmbeddingMatrix::zeros(r, d))
                .collect(),
            comment_encoder: crate::encoder::EncoderParams::zeros(header.encoders[0].0, header.encoders[0].1),
            translation_encoder: crate::encoder::EncoderParams::zeros(header.encoders[1].0, header.encoders[1].1),
        };
        let mut floats = body[16 + header_len..].chunks_exact(4);
        if body[16 + header_len..].len() % 4 != 0 {
            return Err(corrupt("tensor data misaligned"));
        }
        let mut fill = |m: &mut Model<f32>| -> Result<(), PipelineError> {
            for t in m.tensors_mut() {
                for x in t.iter_mut() {
                    let c = floats.next().ok_or_else(|| corrupt("tensor data truncated"))?;
                    *x = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                }
            }
            Ok(())
        };
        let mut model = template.clone();
        let mut first = template.clone();
        let mut second = template;
        fill(&mut model)?;
        fill(&mut first)?;
        fill(&mut second)?;
        if floats.next().is_some() {
            return Err(corrupt("trailing tensor data"));
        }
        Ok(Self {
            config: header.config,
            vocab_checksums,
            rules_checksum,
            state: TrainState {
                model,
                optimizer: OptimizerState {
                    step: header.optimizer_step,
                    first,
                    second,
                },
                epoch: header.epoch,
            },
        })
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    fs::write(path, cp.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

/// Result of [`train_on_records`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub vocabs: Vocabularies,
    /// The selected (lowest validation loss) state.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Trains with the given (or freshly built) vocabularies.
pub fn train_on_records(
    config: &TrainConfig,
    records: &[PreparedRecord],
    vocabs: Option<Vocabularies>,
    rules: &RuleSet,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedModel, PipelineError> {
    let vocabs = match vocabs {
        Some(v) => v,
        None => Vocabularies::build(records, config.word_mapping, config.vocab_size)?,
    };
    if vocabs.mapping() != config.word_mapping {
        return Err(TrainError::InvalidConfig("vocabularies do not match the word mapping".into()).into());
    }
    let pairs = training_pairs(records, &vocabs);
    let initial = Model::init(config, &vocabs.as_list())?;
    let outcome = train(config, &pairs, initial, on_epoch)?;
    let checkpoint = Checkpoint {
        config: config.clone(),
        vocab_checksums: vocabs.checksums(),
        rules_checksum: rules.checksum(),
        state: outcome.best,
    };
    Ok(TrainedModel {
        vocabs,
        checkpoint,
        best_epoch: outcome.best_epoch,
        log: outcome.log,
    })
}

pub fn embed_translations(
    model: &Model<f32>,
    vocabs: &Vocabularies,
    records: &[PreparedRecord],
) -> Result<Vec<Vec<f32>>, PipelineError> {
    records
        .iter()
        .map(|r| Ok(model.encode_translation(&truncated(map_tokens(vocabs.translation(), &r.translation)))?))
        .collect()
}

pub fn embed_query(model: &Model<f32>, vocabs: &Vocabularies, text: &str) -> Result<Vec<f32>, PipelineError> {
    let ids = truncated(map_tokens(vocabs.comment(), &tokenize(text)));
    Ok(model.encode_comment(&ids)?)
}

/// Distractor-protocol evaluation: each record's comment queries all
/// records' translations.
pub fn evaluate_records(
    model: &Model<f32>,
    vocabs: &Vocabularies,
    records: &[PreparedRecord],
    cutoff: usize,
) -> Result<EvalOutcome, PipelineError> {
    let translations = embed_translations(model, vocabs, records)?;
    let pairs = records
        .iter()
        .zip(translations)
        .map(|(r, t)| {
            let c = model.encode_comment(&truncated(map_tokens(vocabs.comment(), &r.comment)))?;
            Ok((c, t))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(evaluate_distractor_protocol(&pairs, cutoff)?)
}

pub fn load_vocabularies(path: &Path, comment_path: Option<&Path>) -> Result<Vocabularies, PipelineError> {
    let first = Vocabulary::from_text(&read_file(path)?)?;
    Ok(match comment_path {
        None => Vocabularies::Shared(first),
        Some(p) => Vocabularies::Separate {
            translation: first,
            comment: Vocabulary::from_text(&read_file(p)?)?,
        },
    })
}

pub fn load_rules(path: Option<&Path>) -> Result<RuleSet, PipelineError> {
    Ok(match path {
        Some(p) => crate::ruleset::load_rules(&read_file(p)?)?,
        None => RuleSet::shipped(),
    })
}
