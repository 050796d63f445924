//! Tokenization, the shared vocabulary and the embedding matrix.

use std::collections::HashMap;

use num_traits::Float;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
/// Token emitted for a sentence boundary in translator output.
pub const BOUNDARY_TOKEN: &str = ".";
pub const INIT_RANGE: f32 = 0.1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary size must be at least 3, got {0}")]
    SizeTooSmall(usize),
    #[error("vocabulary file line {line}: {message}")]
    MalformedVocabulary { line: usize, message: String },
}

/// Lowercase word tokens; never contains an empty string.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

impl<'a> IntoIterator for &'a TokenSeq {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Splits one alphanumeric run at camelCase boundaries.
fn split_camel(word: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    for i in 1..chars.len() {
        let (prev, cur) = (chars[i - 1], chars[i]);
        let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
        let boundary =
            cur.is_uppercase() && (prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower));
        if boundary {
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
            start = i;
        }
    }
    if start < chars.len() {
        out.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
}

/// Splits on whitespace and punctuation (including `_`), splits camelCase
/// words and lowercases. A `.` followed by whitespace or the end of input is
/// a sentence boundary and becomes the token `.`; a `-` directly before a
/// digit at the start of a word is kept as a sign.
pub fn tokenize(text: &str) -> TokenSeq {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            split_camel(word, out);
            word.clear();
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        let next = chars.get(i + 1).copied();
        if c == '-' && word.is_empty() && next.is_some_and(|n| n.is_ascii_digit()) {
            word.push(c);
            continue;
        }
        flush(&mut word, &mut out);
        if c == '.' && next.is_none_or(char::is_whitespace) {
            out.push(BOUNDARY_TOKEN.to_string());
        }
    }
    flush(&mut word, &mut out);
    out.retain(|t| !t.is_empty() && t != "-");
    TokenSeq(out)
}

/// Word list with `<pad>` at id 0 and `<unk>` at id 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, ids }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// One word per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        let bad = |line: usize, message: &str| TextError::MalformedVocabulary {
            line,
            message: message.to_string(),
        };
        if words.first().map(String::as_str) != Some(PAD) {
            return Err(bad(1, "first entry must be <pad>"));
        }
        if words.get(1).map(String::as_str) != Some(UNK) {
            return Err(bad(2, "second entry must be <unk>"));
        }
        let mut seen = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(bad(i + 1, "empty word"));
            }
            if seen.insert(w.as_str(), i).is_some() {
                return Err(bad(i + 1, "duplicate word"));
            }
        }
        Ok(Self::from_words(words))
    }

    pub fn checksum(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn top_words<'a, I>(docs: I, n: usize) -> Result<Vocabulary, TextError>
where
    I: IntoIterator<Item = &'a TokenSeq>,
{
    if n < 3 {
        return Err(TextError::SizeTooSmall(n));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in docs {
        for t in doc.iter() {
            if t != PAD && t != UNK {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let words = [PAD, UNK]
        .into_iter()
        .chain(ranked.into_iter().take(n - 2).map(|(w, _)| w))
        .map(str::to_string)
        .collect();
    Ok(Vocabulary::from_words(words))
}

/// One vocabulary over translations and comments together: the `n - 2` most
/// frequent words, ties broken lexicographically.
pub fn build_shared_vocabulary(
    translations: &[TokenSeq],
    comments: &[TokenSeq],
    n: usize,
) -> Result<Vocabulary, TextError> {
    top_words(translations.iter().chain(comments), n)
}

/// Vocabulary over a single corpus, used when translations and comments get
/// separate word mappings.
pub fn build_vocabulary(corpus: &[TokenSeq], n: usize) -> Result<Vocabulary, TextError> {
    top_words(corpus, n)
}

/// Out-of-vocabulary words map to [`UNK_ID`].
pub fn map_tokens(v: &Vocabulary, t: &TokenSeq) -> Vec<u32> {
    t.iter().map(|w| v.id(w).unwrap_or(UNK_ID)).collect()
}

/// Row-major `rows × dim` matrix; row [`PAD_ID`] stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<F = f32> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<F>,
}

impl<F: Float> EmbeddingMatrix<F> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![F::zero(); rows * dim],
        }
    }

    pub fn row(&self, id: u32) -> &[F] {
        let start = id as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn row_mut(&mut self, id: u32) -> &mut [F] {
        let start = id as usize * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn cast<G: Float>(&self) -> EmbeddingMatrix<G> {
        EmbeddingMatrix {
            rows: self.rows,
            dim: self.dim,
            data: self.data.iter().map(|&x| G::from(x).expect("float cast")).collect(),
        }
    }
}

/// Uniform values in `[-0.1, 0.1]` from a seeded generator, PAD row zero.
pub fn init_embeddings(v: &Vocabulary, m: usize, seed: u64) -> EmbeddingMatrix<f32> {
    assert!(m >= 1, "embedding dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
    let mut e = EmbeddingMatrix {
        rows: v.len(),
        dim: m,
        data: (0..v.len() * m).map(|_| dist.sample(&mut rng)).collect(),
    };
    e.row_mut(PAD_ID).fill(0.0);
    e
}
