//! Joint training of the comment and translation encoders with a margin
//! ranking loss over ⟨translation, comment+, comment−⟩ triplets.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{backward_into, dropout_mask, encode, lit, EncoderError, EncoderParams, Scalar};
use crate::text::{init_embeddings, EmbeddingMatrix, Vocabulary, PAD_ID};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// Whether translations and comments share one vocabulary and embedding
/// matrix or use one each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordMapping {
    Shared,
    Separate,
}

impl fmt::Display for WordMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WordMapping::Shared => "shared",
            WordMapping::Separate => "separate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    /// Fraction of pairs held out for model selection.
    pub validation_fraction: f64,
    pub word_mapping: WordMapping,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            vocab_size: 15_000,
            embed_dim: 512,
            hidden_dim: 512,
            margin: 0.6,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            dropout: 0.1,
            epochs: 200,
            clip_norm: 5.0,
            validation_fraction: 0.05,
            word_mapping: WordMapping::Shared,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.epochs == 0 {
            return bad("batch_size, embed_dim, hidden_dim and epochs must be positive");
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must be at least 3");
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.margin) {
            return bad("margin must be positive");
        }
        if !positive(self.learning_rate) || self.weight_decay < 0.0 || !positive(self.clip_norm) {
            return bad("learning_rate and clip_norm must be positive, weight_decay nonnegative");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("dropout and validation_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub snippet_id: String,
    pub translation_ids: Vec<u32>,
    pub comment_ids: Vec<u32>,
}

/// Indices into the pair list: the anchor pair supplies the translation and
/// the positive comment, `negative` supplies the negative comment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub pair: usize,
    pub negative: usize,
}

/// One triplet per pair with a uniformly drawn negative from a different
/// pair; deterministic per `(seed, epoch)`.
pub fn sample_negatives(pair_count: usize, seed: u64, epoch: u64) -> Result<Vec<Triplet>, TrainError> {
    if pair_count < 2 {
        return Err(TrainError::TooFewPairs(pair_count));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    Ok((0..pair_count)
        .map(|pair| {
            let mut negative = rng.gen_range(0..pair_count);
            while negative == pair {
                negative = rng.gen_range(0..pair_count);
            }
            Triplet { pair, negative }
        })
        .collect())
}

fn norm<F: Scalar>(v: &[F]) -> F {
    v.iter().fold(F::zero(), |s, &x| s + x * x).sqrt()
}

pub fn cosine<F: Scalar>(a: &[F], b: &[F]) -> Result<F, TrainError> {
    let (na, nb) = (norm(a), norm(b));
    if na == F::zero() || nb == F::zero() {
        return Err(TrainError::ZeroVector);
    }
    let d = a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y);
    Ok(d / (na * nb))
}

/// Adds `scale · ∂cos(a, b)/∂a` into `out`.
fn cosine_grad_into<F: Scalar>(a: &[F], b: &[F], scale: F, out: &mut [F]) -> Result<(), TrainError> {
    let (na, nb) = (norm(a), norm(b));
    let c = cosine(a, b)?;
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = *o + scale * (y / (na * nb) - c * x / (na * na));
    }
    Ok(())
}

/// `max(0, margin − cos(t, c+) + cos(t, c−))`
pub fn ranking_loss<F: Scalar>(t: &[F], c_pos: &[F], c_neg: &[F], margin: F) -> Result<F, TrainError> {
    let v = margin - cosine(t, c_pos)? + cosine(t, c_neg)?;
    Ok(v.max(F::zero()))
}

/// Embedding matrices plus the two encoders. Under [`WordMapping::Shared`]
/// there is one matrix; otherwise the translation matrix comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f32> {
    pub mapping: WordMapping,
    pub embeddings: Vec<EmbeddingMatrix<F>>,
    pub comment_encoder: EncoderParams<F>,
    pub translation_encoder: EncoderParams<F>,
}

impl Model<f32> {
    /// `vocabs` holds one vocabulary when shared, else translation then
    /// comment vocabulary.
    pub fn init(config: &TrainConfig, vocabs: &[&Vocabulary]) -> Result<Self, TrainError> {
        let expected = match config.word_mapping {
            WordMapping::Shared => 1,
            WordMapping::Separate => 2,
        };
        if vocabs.len() != expected {
            return Err(TrainError::ShapeMismatch(format!(
                "{} word mapping needs {expected} vocabularies, got {}",
                config.word_mapping,
                vocabs.len()
            )));
        }
        let embeddings = vocabs
            .iter()
            .enumerate()
            .map(|(k, v)| init_embeddings(v, config.embed_dim, config.seed.wrapping_add(k as u64)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let comment_encoder = EncoderParams::random(config.embed_dim, config.hidden_dim, &mut rng);
        let translation_encoder = EncoderParams::random(config.embed_dim, config.hidden_dim, &mut rng);
        Ok(Self {
            mapping: config.word_mapping,
            embeddings,
            comment_encoder,
            translation_encoder,
        })
    }
}

impl<F: Scalar> Model<F> {
    pub fn zeros_like(&self) -> Self {
        Self {
            mapping: self.mapping,
            embeddings: self
                .embeddings
                .iter()
                .map(|e| EmbeddingMatrix::zeros(e.rows, e.dim))
                .collect(),
            comment_encoder: EncoderParams::zeros(self.comment_encoder.input_dim, self.comment_encoder.hidden_dim),
            translation_encoder: EncoderParams::zeros(
                self.translation_encoder.input_dim,
                self.translation_encoder.hidden_dim,
            ),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            mapping: self.mapping,
            embeddings: self.embeddings.iter().map(EmbeddingMatrix::cast).collect(),
            comment_encoder: self.comment_encoder.cast(),
            translation_encoder: self.translation_encoder.cast(),
        }
    }

    pub fn translation_embedding(&self) -> &EmbeddingMatrix<F> {
        &self.embeddings[0]
    }

    pub fn comment_embedding(&self) -> &EmbeddingMatrix<F> {
        self.embeddings.last().expect("model has an embedding matrix")
    }

    fn comment_slot(&self) -> usize {
        self.embeddings.len() - 1
    }

    /// All tensors in a fixed order: embedding matrices, then the comment
    /// encoder, then the translation encoder.
    pub fn tensors(&self) -> Vec<&Vec<F>> {
        let mut out: Vec<&Vec<F>> = self.embeddings.iter().map(|e| &e.data).collect();
        out.extend(self.comment_encoder.tensors());
        out.extend(self.translation_encoder.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out: Vec<&mut Vec<F>> = self.embeddings.iter_mut().map(|e| &mut e.data).collect();
        out.extend(self.comment_encoder.tensors_mut());
        out.extend(self.translation_encoder.tensors_mut());
        out
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.mapping == other.mapping
            && self
                .tensors()
                .iter()
                .map(|t| t.len())
                .eq(other.tensors().iter().map(|t| t.len()))
    }

    pub fn encode_comment(&self, ids: &[u32]) -> Result<Vec<F>, TrainError> {
        let mask = vec![false; ids.len()];
        Ok(encode(&self.comment_encoder, self.comment_embedding(), ids, &mask, None)?.embedding)
    }

    pub fn encode_translation(&self, ids: &[u32]) -> Result<Vec<F>, TrainError> {
        let mask = vec![false; ids.len()];
        Ok(encode(
            &self.translation_encoder,
            self.translation_embedding(),
            ids,
            &mask,
            None,
        )?
        .embedding)
    }
}

/// Input-dropout masks for the three encoder calls of one triplet.
#[derive(Debug, Clone, Default)]
pub struct TripletDropout<F> {
    pub translation: Option<Vec<F>>,
    pub positive: Option<Vec<F>>,
    pub negative: Option<Vec<F>>,
}

/// Loss of one triplet; when the hinge is active, `scale ×` its gradient is
/// added into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn triplet_loss_and_grads<F: Scalar>(
    model: &Model<F>,
    t_ids: &[u32],
    pos_ids: &[u32],
    neg_ids: &[u32],
    margin: F,
    dropout: &TripletDropout<F>,
    scale: F,
    grads: &mut Model<F>,
) -> Result<F, TrainError> {
    let mask = |ids: &[u32]| vec![false; ids.len()];
    let t = encode(
        &model.translation_encoder,
        model.translation_embedding(),
        t_ids,
        &mask(t_ids),
        dropout.translation.as_deref(),
    )?;
    let cp = encode(
        &model.comment_encoder,
        model.comment_embedding(),
        pos_ids,
        &mask(pos_ids),
        dropout.positive.as_deref(),
    )?;
    let cn = encode(
        &model.comment_encoder,
        model.comment_embedding(),
        neg_ids,
        &mask(neg_ids),
        dropout.negative.as_deref(),
    )?;
    let loss = ranking_loss(&t.embedding, &cp.embedding, &cn.embedding, margin)?;
    if loss <= F::zero() {
        return Ok(loss);
    }

    let h = t.embedding.len();
    let mut dt = vec![F::zero(); h];
    let mut dp = vec![F::zero(); h];
    let mut dn = vec![F::zero(); h];
    cosine_grad_into(&t.embedding, &cp.embedding, -scale, &mut dt)?;
    cosine_grad_into(&t.embedding, &cn.embedding, scale, &mut dt)?;
    cosine_grad_into(&cp.embedding, &t.embedding, -scale, &mut dp)?;
    cosine_grad_into(&cn.embedding, &t.embedding, scale, &mut dn)?;

    let comment_slot = model.comment_slot();
    let mut rows = std::collections::BTreeMap::new();
    backward_into(
        &model.translation_encoder,
        &t.cache,
        &dt,
        &mut grads.translation_encoder,
        &mut rows,
    )?;
    add_rows(&mut grads.embeddings[0], &mut rows);
    backward_into(
        &model.comment_encoder,
        &cp.cache,
        &dp,
        &mut grads.comment_encoder,
        &mut rows,
    )?;
    backward_into(
        &model.comment_encoder,
        &cn.cache,
        &dn,
        &mut grads.comment_encoder,
        &mut rows,
    )?;
    add_rows(&mut grads.embeddings[comment_slot], &mut rows);
    Ok(loss)
}

fn add_rows<F: Scalar>(dense: &mut EmbeddingMatrix<F>, rows: &mut std::collections::BTreeMap<u32, Vec<F>>) {
    for (id, row) in std::mem::take(rows) {
        for (d, r) in dense.row_mut(id).iter_mut().zip(row) {
            *d = *d + r;
        }
    }
}

/// AdamW hyperparameters; moment decay and epsilon follow the usual defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update of `p` in place. `step` counts from 1.
    pub fn update<F: Scalar>(&self, step: u64, p: &mut [F], g: &[F], m: &mut [F], v: &mut [F]) {
        let (b1, b2): (F, F) = (lit(self.beta1), lit(self.beta2));
        let lr: F = lit(self.learning_rate);
        let decay = F::one() - lr * lit(self.weight_decay);
        let c1 = F::one() - b1.powi(step as i32);
        let c2 = F::one() - b2.powi(step as i32);
        let eps: F = lit(self.eps);
        for (((x, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *x = *x * decay;
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// First and second moments per model tensor, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F = f32> {
    pub step: u64,
    pub first: Model<F>,
    pub second: Model<F>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(model: &Model<F>) -> Self {
        Self {
            step: 0,
            first: model.zeros_like(),
            second: model.zeros_like(),
        }
    }
}

/// One AdamW step over every tensor. The PAD row of each embedding matrix is
/// never touched.
pub fn optimizer_step<F: Scalar>(
    params: &mut Model<F>,
    grads: &Model<F>,
    state: &mut OptimizerState<F>,
    opt: &AdamW,
) -> Result<(), TrainError> {
    if !params.same_shape(grads) || !params.same_shape(&state.first) || !params.same_shape(&state.second) {
        return Err(TrainError::ShapeMismatch("params, grads and moments differ".into()));
    }
    state.step += 1;
    let n_emb = params.embeddings.len();
    let skips: Vec<usize> = params
        .embeddings
        .iter()
        .map(|e| (PAD_ID as usize + 1) * e.dim)
        .chain(std::iter::repeat(0))
        .take(params.tensors().len())
        .collect();
    let grads = grads.tensors();
    let firsts = state.first.tensors_mut();
    let seconds = state.second.tensors_mut();
    for (k, (((p, g), m), v)) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(firsts)
        .zip(seconds)
        .enumerate()
    {
        let s = if k < n_emb { skips[k] } else { 0 };
        opt.update(state.step, &mut p[s..], &g[s..], &mut m[s..], &mut v[s..]);
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut Model<F>, max_norm: f64) -> f64 {
    let sq = grads.tensors().iter().flat_map(|t| t.iter()).fold(0.0f64, |s, &x| {
        let x = x.to_f64().unwrap_or(f64::NAN);
        s + x * x
    });
    let n = sq.sqrt();
    if n > max_norm {
        let factor: F = lit(max_norm / n);
        for t in grads.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x * factor;
            }
        }
    }
    n
}

/// Deterministic split of pair indices into (train, validation).
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let held = (n as f64 * fraction).round() as usize;
    if held < 2 || n - held < 2 {
        return (idx, Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    idx.shuffle(&mut rng);
    let val = idx.split_off(n - held);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.validation_loss {
            Some(v) => write!(f, "{}\t{:.6}\t{:.6}", self.epoch, self.train_loss, v),
            None => write!(f, "{}\t{:.6}\t-", self.epoch, self.train_loss),
        }
    }
}

/// Model, optimizer state and epoch counter at one point of training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub optimizer: OptimizerState<f32>,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model<f32>) -> Self {
        let optimizer = OptimizerState::new(&model);
        Self {
            model,
            optimizer,
            epoch: 0,
        }
    }
}

fn epoch_rng(seed: u64, epoch: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng
}

/// One pass over `pairs` in shuffled mini-batches. Returns the mean
/// triplet loss.
pub fn train_epoch(state: &mut TrainState, pairs: &[&TrainingPair], config: &TrainConfig) -> Result<f64, TrainError> {
    let epoch = state.epoch;
    let mut triplets = sample_negatives(pairs.len(), config.seed, epoch as u64)?;
    triplets.shuffle(&mut epoch_rng(config.seed, epoch as u64, 1));
    let mut drop_rng = epoch_rng(config.seed, epoch as u64, 2);
    let opt = AdamW::from_config(config);
    let margin: f32 = lit(config.margin);
    let m = config.embed_dim;
    let mut grads = state.model.zeros_like();
    let mut total = 0.0f64;

    for (b, batch) in triplets.chunks(config.batch_size).enumerate() {
        for t in grads.tensors_mut() {
            t.fill(0.0);
        }
        let scale = 1.0 / batch.len() as f32;
        let mut batch_loss = 0.0f64;
        for tr in batch {
            let (anchor, neg) = (pairs[tr.pair], pairs[tr.negative]);
            let mut mask =
                |len: usize| (config.dropout > 0.0).then(|| dropout_mask(len, m, config.dropout, &mut drop_rng));
            let dropout = TripletDropout {
                translation: mask(anchor.translation_ids.len()),
                positive: mask(anchor.comment_ids.len()),
                negative: mask(neg.comment_ids.len()),
            };
            let loss = triplet_loss_and_grads(
                &state.model,
                &anchor.translation_ids,
                &anchor.comment_ids,
                &neg.comment_ids,
                margin,
                &dropout,
                scale,
                &mut grads,
            )?;
            batch_loss += f64::from(loss);
        }
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: b,
                loss: batch_loss,
            });
        }
        clip_global_norm(&mut grads, config.clip_norm);
        optimizer_step(&mut state.model, &grads, &mut state.optimizer, &opt)?;
        total += batch_loss;
    }
    state.epoch += 1;
    Ok(total / triplets.len() as f64)
}

/// Mean triplet loss in evaluation mode, taking every other pair as a
/// negative so that small splits still give a stable selection signal.
pub fn evaluate_loss(model: &Model<f32>, pairs: &[&TrainingPair], margin: f64) -> Result<f64, TrainError> {
    if pairs.len() < 2 {
        return Err(TrainError::TooFewPairs(pairs.len()));
    }
    let ts: Vec<Vec<f32>> = pairs
        .iter()
        .map(|p| model.encode_translation(&p.translation_ids))
        .collect::<Result<_, _>>()?;
    let cs: Vec<Vec<f32>> = pairs
        .iter()
        .map(|p| model.encode_comment(&p.comment_ids))
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for i in 0..pairs.len() {
        for j in (0..pairs.len()).filter(|&j| j != i) {
            total += f64::from(ranking_loss(&ts[i], &cs[i], &cs[j], lit::<f32>(margin))?);
        }
    }
    Ok(total / (pairs.len() * (pairs.len() - 1)) as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the lowest validation loss (the last one without a
    /// validation split).
    pub best: TrainState,
    pub best_epoch: usize,
    pub last: TrainState,
    pub log: Vec<EpochLog>,
}

/// Trains for `config.epochs` epochs from `initial`, holding out a
/// validation split for model selection. `on_epoch` sees each log line.
pub fn train(
    config: &TrainConfig,
    pairs: &[TrainingPair],
    initial: Model<f32>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if pairs.len() < 2 {
        return Err(TrainError::TooFewPairs(pairs.len()));
    }
    let (train_idx, val_idx) = split_validation(pairs.len(), config.validation_fraction, config.seed);
    let train_pairs: Vec<&TrainingPair> = train_idx.iter().map(|&i| &pairs[i]).collect();
    let val_pairs: Vec<&TrainingPair> = val_idx.iter().map(|&i| &pairs[i]).collect();

    let mut state = TrainState::new(initial);
    let mut best: Option<(f64, TrainState)> = None;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let train_loss = train_epoch(&mut state, &train_pairs, config)?;
        let validation_loss = if val_pairs.is_empty() {
            None
        } else {
            Some(evaluate_loss(&state.model, &val_pairs, config.margin)?)
        };
        let entry = EpochLog {
            epoch: state.epoch,
            train_loss,
            validation_loss,
        };
        on_epoch(&entry);
        log.push(entry);
        let score = validation_loss.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _)| score <= *b) {
            best = Some((score, state.clone()));
            best_epoch = state.epoch;
        }
    }
    let (_, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: state,
        log,
    })
}
