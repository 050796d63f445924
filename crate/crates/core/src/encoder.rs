//! Recurrent-attention sequence encoder with a hand-written backward pass.
//!
//! A single-layer LSTM runs over the non-PAD tokens, an affine projection of
//! each hidden state is scored against a context vector, and the softmax of
//! those scores pools the hidden states into one vector. The code is generic
//! over the float type so gradients can be checked in `f64` while training
//! runs in `f32`.

use std::collections::BTreeMap;
use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::text::EmbeddingMatrix;

/// Longer sequences are truncated from the tail.
pub const MAX_SEQ_LEN: usize = 512;

pub trait Scalar: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {}
impl<T: Float + FromPrimitive + Debug + Default + Send + Sync + 'static> Scalar for T {}

pub(crate) fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncoderError {
    #[error("sequence has no non-PAD tokens")]
    EmptySequence,
    #[error("{ids} ids but {mask} mask entries")]
    LengthMismatch { ids: usize, mask: usize },
    #[error("forward cache does not match: {0}")]
    CacheMismatch(String),
    #[error("token id {id} outside embedding matrix with {rows} rows")]
    IdOutOfRange { id: u32, rows: usize },
    #[error("embedding dimension {got} does not match encoder input dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
}

/// LSTM weights (gate rows ordered input, forget, candidate, output), the
/// attention projection `attn_w·h + attn_b` and the context vector `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F = f32> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// 4h × m
    pub w_ih: Vec<F>,
    /// 4h × h
    pub w_hh: Vec<F>,
    /// 4h
    pub bias: Vec<F>,
    /// h × h
    pub attn_w: Vec<F>,
    /// h
    pub attn_b: Vec<F>,
    /// h
    pub context: Vec<F>,
}

pub const TENSOR_NAMES: [&str; 6] = ["w_ih", "w_hh", "bias", "attn_w", "attn_b", "context"];

impl<F: Scalar> EncoderParams<F> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let (m, h) = (input_dim, hidden_dim);
        Self {
            input_dim,
            hidden_dim,
            w_ih: vec![F::zero(); 4 * h * m],
            w_hh: vec![F::zero(); 4 * h * h],
            bias: vec![F::zero(); 4 * h],
            attn_w: vec![F::zero(); h * h],
            attn_b: vec![F::zero(); h],
            context: vec![F::zero(); h],
        }
    }

    /// Every weight uniform in `±1/sqrt(h)`.
    pub fn random<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-k, k);
        let mut p = Self::zeros(input_dim, hidden_dim);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x = lit(dist.sample(rng));
            }
        }
        p
    }

    pub fn tensors(&self) -> [&Vec<F>; 6] {
        [
            &self.w_ih,
            &self.w_hh,
            &self.bias,
            &self.attn_w,
            &self.attn_b,
            &self.context,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<F>; 6] {
        [
            &mut self.w_ih,
            &mut self.w_hh,
            &mut self.bias,
            &mut self.attn_w,
            &mut self.attn_b,
            &mut self.context,
        ]
    }

    pub fn same_shape<G>(&self, other: &EncoderParams<G>) -> bool {
        self.input_dim == other.input_dim && self.hidden_dim == other.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        let conv = |v: &Vec<F>| v.iter().map(|&x| G::from(x).expect("float cast")).collect();
        EncoderParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_ih: conv(&self.w_ih),
            w_hh: conv(&self.w_hh),
            bias: conv(&self.bias),
            attn_w: conv(&self.attn_w),
            attn_b: conv(&self.attn_b),
            context: conv(&self.context),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(F::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }
}

/// out += W·x for row-major `W` (rows × x.len()).
fn matvec_add<F: Scalar>(w: &[F], x: &[F], out: &mut [F]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        let mut acc = F::zero();
        for (&a, &b) in row.iter().zip(x) {
            acc = acc + a * b;
        }
        *o = *o + acc;
    }
}

/// out += Wᵀ·y for row-major `W` (y.len() × out.len()).
fn matvec_t_add<F: Scalar>(w: &[F], y: &[F], out: &mut [F]) {
    let cols = out.len();
    for (&yr, row) in y.iter().zip(w.chunks_exact(cols)) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o = *o + a * yr;
        }
    }
}

/// g += y ⊗ x
fn outer_add<F: Scalar>(g: &mut [F], y: &[F], x: &[F]) {
    let cols = x.len();
    for (&yr, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        for (o, &b) in row.iter_mut().zip(x) {
            *o = *o + yr * b;
        }
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Per-step scale factors for inverted dropout on the input embeddings:
/// each entry is 0 with probability `rate`, otherwise `1 / (1 - rate)`.
pub fn dropout_mask<F: Scalar, R: Rng>(len: usize, dim: usize, rate: f64, rng: &mut R) -> Vec<F> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    let keep = lit::<F>(1.0 / (1.0 - rate));
    (0..len * dim)
        .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

/// Inverted dropout in training mode, identity otherwise.
pub fn dropout_apply<F: Scalar>(vecs: &[Vec<F>], rate: f64, seed: u64, train: bool) -> Vec<Vec<F>> {
    if !train || rate == 0.0 {
        return vecs.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vecs.iter()
        .map(|v| {
            let mask: Vec<F> = dropout_mask(1, v.len(), rate, &mut rng);
            v.iter().zip(mask).map(|(&x, s)| x * s).collect()
        })
        .collect()
}

/// Intermediate values of one forward pass, indexed by active (non-PAD) step.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    input_dim: usize,
    hidden_dim: usize,
    ids: Vec<u32>,
    xs: Vec<Vec<F>>,
    dropout: Option<Vec<F>>,
    /// activated gates i, f, g, o per step (4h)
    gates: Vec<Vec<F>>,
    cells: Vec<Vec<F>>,
    hidden: Vec<Vec<F>>,
    projected: Vec<Vec<F>>,
    alphas: Vec<F>,
}

impl<F> ForwardCache<F> {
    pub fn active_ids(&self) -> &[u32] {
        &self.ids
    }
}

#[derive(Debug, Clone)]
pub struct Encoding<F> {
    pub embedding: Vec<F>,
    /// One per input position; zero at PAD positions.
    pub hidden_states: Vec<Vec<F>>,
    /// One per input position; zero at PAD positions.
    pub attn_weights: Vec<F>,
    pub cache: ForwardCache<F>,
}

/// Encodes `ids` (with `pad_mask[i]` true for padding) into one vector.
/// `dropout`, when given, holds per-active-step input scale factors
/// (see [`dropout_mask`]).
pub fn encode<F: Scalar>(
    p: &EncoderParams<F>,
    emb: &EmbeddingMatrix<F>,
    ids: &[u32],
    pad_mask: &[bool],
    dropout: Option<&[F]>,
) -> Result<Encoding<F>, EncoderError> {
    if ids.len() != pad_mask.len() {
        return Err(EncoderError::LengthMismatch {
            ids: ids.len(),
            mask: pad_mask.len(),
        });
    }
    if emb.dim != p.input_dim {
        return Err(EncoderError::DimMismatch {
            expected: p.input_dim,
            got: emb.dim,
        });
    }
    let len = ids.len().min(MAX_SEQ_LEN);
    let positions: Vec<usize> = (0..len).filter(|&i| !pad_mask[i]).collect();
    if positions.is_empty() {
        return Err(EncoderError::EmptySequence);
    }
    if let Some(&id) = positions.iter().map(|&i| &ids[i]).find(|&&id| id as usize >= emb.rows) {
        return Err(EncoderError::IdOutOfRange { id, rows: emb.rows });
    }
    let (m, h) = (p.input_dim, p.hidden_dim);
    let steps = positions.len();
    let dropout = dropout.map(|d| {
        assert!(d.len() >= steps * m, "dropout mask too short");
        d[..steps * m].to_vec()
    });

    let mut cache = ForwardCache {
        input_dim: m,
        hidden_dim: h,
        ids: positions.iter().map(|&i| ids[i]).collect(),
        xs: Vec::with_capacity(steps),
        dropout,
        gates: Vec::with_capacity(steps),
        cells: Vec::with_capacity(steps),
        hidden: Vec::with_capacity(steps),
        projected: Vec::with_capacity(steps),
        alphas: Vec::with_capacity(steps),
    };

    let zero_h = vec![F::zero(); h];
    for t in 0..steps {
        let row = emb.row(cache.ids[t]);
        let x: Vec<F> = match &cache.dropout {
            Some(d) => row.iter().zip(&d[t * m..(t + 1) * m]).map(|(&a, &s)| a * s).collect(),
            None => row.to_vec(),
        };
        let (h_prev, c_prev) = if t == 0 {
            (&zero_h, &zero_h)
        } else {
            (&cache.hidden[t - 1], &cache.cells[t - 1])
        };
        let mut z = p.bias.clone();
        matvec_add(&p.w_ih, &x, &mut z);
        matvec_add(&p.w_hh, h_prev, &mut z);
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = if (2 * h..3 * h).contains(&k) {
                zk.tanh()
            } else {
                sigmoid(*zk)
            };
        }
        let mut c = vec![F::zero(); h];
        let mut hn = vec![F::zero(); h];
        for j in 0..h {
            let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
            c[j] = f * c_prev[j] + i * g;
            hn[j] = o * c[j].tanh();
        }
        let mut a = p.attn_b.clone();
        matvec_add(&p.attn_w, &hn, &mut a);
        cache.xs.push(x);
        cache.gates.push(z);
        cache.cells.push(c);
        cache.hidden.push(hn);
        cache.projected.push(a);
    }

    let logits: Vec<F> = cache.projected.iter().map(|a| dot(a, &p.context)).collect();
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total = exps.iter().fold(F::zero(), |s, &e| s + e);
    cache.alphas = exps.iter().map(|&e| e / total).collect();

    let mut embedding = vec![F::zero(); h];
    for (alpha, hs) in cache.alphas.iter().zip(&cache.hidden) {
        for (e, &v) in embedding.iter_mut().zip(hs) {
            *e = *e + *alpha * v;
        }
    }

    let mut hidden_states = vec![zero_h.clone(); ids.len()];
    let mut attn_weights = vec![F::zero(); ids.len()];
    for (t, &pos) in positions.iter().enumerate() {
        hidden_states[pos] = cache.hidden[t].clone();
        attn_weights[pos] = cache.alphas[t];
    }
    Ok(Encoding {
        embedding,
        hidden_states,
        attn_weights,
        cache,
    })
}

/// Gradient of the pooled vector's loss with respect to every parameter and
/// to each embedding row that was read.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<F> {
    pub params: EncoderParams<F>,
    pub embedding_rows: BTreeMap<u32, Vec<F>>,
}

pub fn encode_backward<F: Scalar>(
    p: &EncoderParams<F>,
    cache: &ForwardCache<F>,
    d_embedding: &[F],
) -> Result<EncoderGrads<F>, EncoderError> {
    let mut grads = EncoderGrads {
        params: EncoderParams::zeros(p.input_dim, p.hidden_dim),
        embedding_rows: BTreeMap::new(),
    };
    backward_into(p, cache, d_embedding, &mut grads.params, &mut grads.embedding_rows)?;
    Ok(grads)
}

/// Like [`encode_backward`] but adds into existing gradient buffers.
pub fn backward_into<F: Scalar>(
    p: &EncoderParams<F>,
    cache: &ForwardCache<F>,
    d_embedding: &[F],
    grads: &mut EncoderParams<F>,
    rows: &mut BTreeMap<u32, Vec<F>>,
) -> Result<(), EncoderError> {
    let (m, h) = (p.input_dim, p.hidden_dim);
    if cache.input_dim != m || cache.hidden_dim != h {
        return Err(EncoderError::CacheMismatch(format!(
            "cache is {}x{}, params are {m}x{h}",
            cache.input_dim, cache.hidden_dim
        )));
    }
    if d_embedding.len() != h {
        return Err(EncoderError::CacheMismatch(format!(
            "upstream gradient has length {}, expected {h}",
            d_embedding.len()
        )));
    }
    if !grads.same_shape(p) {
        return Err(EncoderError::CacheMismatch(
            "gradient buffer shape differs from params".into(),
        ));
    }
    let steps = cache.hidden.len();

    // pooling and attention
    let d_alpha: Vec<F> = cache.hidden.iter().map(|hs| dot(d_embedding, hs)).collect();
    let mean = cache
        .alphas
        .iter()
        .zip(&d_alpha)
        .fold(F::zero(), |s, (&a, &d)| s + a * d);
    let mut dh: Vec<Vec<F>> = Vec::with_capacity(steps);
    let mut da = vec![F::zero(); h];
    for (t, &d_alpha_t) in d_alpha.iter().enumerate() {
        let alpha = cache.alphas[t];
        let d_logit = alpha * (d_alpha_t - mean);
        let mut dht: Vec<F> = d_embedding.iter().map(|&d| alpha * d).collect();
        for (g, &a) in grads.context.iter_mut().zip(&cache.projected[t]) {
            *g = *g + d_logit * a;
        }
        for (d, &u) in da.iter_mut().zip(&p.context) {
            *d = d_logit * u;
        }
        outer_add(&mut grads.attn_w, &da, &cache.hidden[t]);
        for (g, &d) in grads.attn_b.iter_mut().zip(&da) {
            *g = *g + d;
        }
        matvec_t_add(&p.attn_w, &da, &mut dht);
        dh.push(dht);
    }

    // recurrence
    let zero_h = vec![F::zero(); h];
    let mut dh_next = vec![F::zero(); h];
    let mut dc_next = vec![F::zero(); h];
    let mut dz = vec![F::zero(); 4 * h];
    for t in (0..steps).rev() {
        let z = &cache.gates[t];
        let c = &cache.cells[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zero_h, &zero_h)
        } else {
            (&cache.hidden[t - 1], &cache.cells[t - 1])
        };
        for j in 0..h {
            let (i, f, g, o) = (z[j], z[h + j], z[2 * h + j], z[3 * h + j]);
            let d = dh[t][j] + dh_next[j];
            let tc = c[j].tanh();
            let d_o = d * tc;
            let dc = dc_next[j] + d * o * (F::one() - tc * tc);
            dz[j] = dc * g * i * (F::one() - i);
            dz[h + j] = dc * c_prev[j] * f * (F::one() - f);
            dz[2 * h + j] = dc * i * (F::one() - g * g);
            dz[3 * h + j] = d_o * o * (F::one() - o);
            dc_next[j] = dc * f;
        }
        outer_add(&mut grads.w_ih, &dz, &cache.xs[t]);
        outer_add(&mut grads.w_hh, &dz, h_prev);
        for (g, &d) in grads.bias.iter_mut().zip(&dz) {
            *g = *g + d;
        }
        let mut dx = vec![F::zero(); m];
        matvec_t_add(&p.w_ih, &dz, &mut dx);
        if let Some(mask) = &cache.dropout {
            for (d, &s) in dx.iter_mut().zip(&mask[t * m..(t + 1) * m]) {
                *d = *d * s;
            }
        }
        let row = rows.entry(cache.ids[t]).or_insert_with(|| vec![F::zero(); m]);
        for (r, &d) in row.iter_mut().zip(&dx) {
            *r = *r + d;
        }
        dh_next.fill(F::zero());
        matvec_t_add(&p.w_hh, &dz, &mut dh_next);
    }
    Ok(())
}
