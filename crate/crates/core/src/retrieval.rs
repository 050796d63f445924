//! Brute-force cosine search and the ranking metrics.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_CUTOFF: usize = 10;
pub const INDEX_MAGIC: &[u8; 4] = b"STIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("no queries to evaluate")]
    EmptyQuerySet,
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("duplicate snippet id `{0}`")]
    DuplicateId(String),
    #[error("vector of length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in vector for `{0}`")]
    NonFinite(String),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

fn normalized(v: &[f32]) -> Result<Vec<f32>, RetrievalError> {
    let n = norm(v);
    if n == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub snippet_id: String,
    pub score: f64,
    /// 1-based
    pub rank: usize,
}

/// Unit-normalized vectors keyed by unique snippet ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

impl SearchIndex {
    pub fn build(entries: Vec<(String, Vec<f32>)>) -> Result<Self, RetrievalError> {
        let dim = entries.first().map_or(0, |(_, v)| v.len());
        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(entries.len());
        let mut vectors = Vec::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(RetrievalError::NonFinite(id));
            }
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateId(id));
            }
            vectors.push(normalized(&v)?);
            ids.push(id);
        }
        Ok(Self { dim, ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Exact top-`min(k, len)` by cosine; equal scores rank by ascending id.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<RankedResult>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let q = normalized(query)?;
        let mut scored: Vec<(f64, &str)> = self
            .vectors
            .iter()
            .zip(&self.ids)
            .map(|(v, id)| (dot(&q, v), id.as_str()))
            .collect();
        scored.sort_by(|a, b| rank_order(a.0, a.1, b.0, b.1));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (score, id))| RankedResult {
                snippet_id: id.to_string(),
                score,
                rank: i + 1,
            })
            .collect())
    }

    /// Writes the versioned binary index: magic, version, dim, count, the
    /// vocabulary and rule-set checksums, ids, little-endian f32 vectors and a
    /// trailing SHA-256 of everything before it.
    pub fn write_to<W: Write>(
        &self,
        out: &mut W,
        vocab_checksum: &[u8; 32],
        rules_checksum: &[u8; 32],
    ) -> Result<(), RetrievalError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(vocab_checksum);
        buf.extend_from_slice(rules_checksum);
        for id in &self.ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        for v in &self.vectors {
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<IndexFile, RetrievalError> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        if buf.len() < 4 + 12 + 64 + 32 || &buf[..4] != INDEX_MAGIC {
            return Err(RetrievalError::Corrupt("missing header".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        let mut r = ByteReader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(RetrievalError::VersionMismatch {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(RetrievalError::Corrupt("checksum mismatch".into()));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let vocab_checksum: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let rules_checksum: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let id =
                std::str::from_utf8(r.take(len)?).map_err(|_| RetrievalError::Corrupt("id is not UTF-8".into()))?;
            ids.push(id.to_string());
        }
        let mut entries = Vec::with_capacity(ids.len());
        for id in ids {
            let v = r
                .take(dim * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push((id, v));
        }
        if r.pos != body.len() {
            return Err(RetrievalError::Corrupt("trailing bytes".into()));
        }
        let index = SearchIndex::build(entries)?;
        Ok(IndexFile {
            index,
            vocab_checksum,
            rules_checksum,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexFile {
    pub index: SearchIndex,
    pub vocab_checksum: [u8; 32],
    pub rules_checksum: [u8; 32],
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| RetrievalError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn rank_order(sa: f64, ia: &str, sb: f64, ib: &str) -> Ordering {
    sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| ia.cmp(ib))
}

/// Rank of the correct result for one query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FRank {
    /// 1-based
    Rank(usize),
    NotFound,
}

impl FRank {
    fn within(self, k: usize) -> bool {
        matches!(self, FRank::Rank(r) if r <= k)
    }
}

impl fmt::Display for FRank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FRank::Rank(r) => write!(f, "{r}"),
            FRank::NotFound => f.write_str("NOT_FOUND"),
        }
    }
}

/// Fraction of queries whose correct result is within the top `k`.
pub fn success_rate_at_k(franks: &[FRank], k: usize) -> Result<f64, RetrievalError> {
    if franks.is_empty() {
        return Err(RetrievalError::EmptyQuerySet);
    }
    if k == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let hits = franks.iter().filter(|f| f.within(k)).count();
    Ok(hits as f64 / franks.len() as f64)
}

/// Mean reciprocal rank; ranks beyond `cutoff` contribute 0.
pub fn mrr(franks: &[FRank], cutoff: usize) -> Result<f64, RetrievalError> {
    if franks.is_empty() {
        return Err(RetrievalError::EmptyQuerySet);
    }
    if cutoff == 0 {
        return Err(RetrievalError::InvalidK);
    }
    let sum: f64 = franks
        .iter()
        .map(|f| match f {
            FRank::Rank(r) if *r <= cutoff => 1.0 / *r as f64,
            _ => 0.0,
        })
        .sum();
    Ok(sum / franks.len() as f64)
}

/// Normalized discounted cumulative gain at `k` for graded relevance labels
/// listed in ranked order. Zero when no label is positive.
pub fn ndcg_at_k(relevance_in_rank_order: &[f64], k: usize) -> f64 {
    let dcg = |rels: &[f64]| -> f64 {
        rels.iter()
            .take(k)
            .enumerate()
            .map(|(i, &r)| (2f64.powf(r) - 1.0) / ((i + 2) as f64).log2())
            .sum()
    };
    let mut ideal = relevance_in_rank_order.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let best = dcg(&ideal);
    if best == 0.0 {
        0.0
    } else {
        dcg(relevance_in_rank_order) / best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub franks: Vec<FRank>,
    pub sr1: f64,
    pub sr5: f64,
    pub sr10: f64,
    pub mrr: f64,
}

impl EvalOutcome {
    pub fn from_franks(franks: Vec<FRank>, cutoff: usize) -> Result<Self, RetrievalError> {
        Ok(Self {
            sr1: success_rate_at_k(&franks, 1)?,
            sr5: success_rate_at_k(&franks, 5)?,
            sr10: success_rate_at_k(&franks, 10)?,
            mrr: mrr(&franks, cutoff)?,
            franks,
        })
    }

    /// Tab-separated header line and value line.
    pub fn report(&self) -> String {
        format!(
            "SR@1\tSR@5\tSR@10\tMRR\n{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            self.sr1, self.sr5, self.sr10, self.mrr
        )
    }
}

/// Each comment queries all translations of the set; the other pairs'
/// translations are its distractors. Ties rank by pair position. Ranks beyond
/// `cutoff` are recorded as [`FRank::NotFound`].
pub fn evaluate_distractor_protocol(
    pairs: &[(Vec<f32>, Vec<f32>)],
    cutoff: usize,
) -> Result<EvalOutcome, RetrievalError> {
    if pairs.len() < 2 {
        return Err(RetrievalError::TooFewPairs(pairs.len()));
    }
    let translations: Vec<Vec<f32>> = pairs.iter().map(|(_, t)| normalized(t)).collect::<Result<_, _>>()?;
    let mut franks = Vec::with_capacity(pairs.len());
    for (i, (comment, _)) in pairs.iter().enumerate() {
        let q = normalized(comment)?;
        let scores: Vec<f64> = translations.iter().map(|t| dot(&q, t)).collect();
        let own = scores[i];
        let better = scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > own || (s == own && j < i))
            .count();
        let rank = better + 1;
        franks.push(if rank <= cutoff {
            FRank::Rank(rank)
        } else {
            FRank::NotFound
        });
    }
    EvalOutcome::from_franks(franks, cutoff)
}

/// Expected MRR when the correct result lands uniformly at random among `n`
/// candidates: `(1/n) Σ_{r ≤ cutoff} 1/r`.
pub fn random_baseline_mrr(n: usize, cutoff: usize) -> f64 {
    (1..=cutoff.min(n)).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}
