//! Desk-scale bidirectional transformer over explicit layouts.
//!
//! Every forward pass takes one token id, one RoPE coordinate and one row of
//! a [`Visibility`] matrix per layout entry, so compressed, folded and
//! anchored layouts all run through the same code. The architecture is
//! pre-norm with RMS normalization, a tanh-GELU MLP and an output head tied
//! to the token embedding. There is no causal mask.
//!
//! The model is generic over the float type: inference runs in `f32`, the
//! gradient check runs the same code in `f64`.

use std::fmt::Debug;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layout::{AnchorAttention, LayoutSelection};
use crate::rope::{RopeError, RopeParams, RopeTable, DEFAULT_THETA_BASE};

pub type TokenId = u32;

pub const RMS_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"EDLM";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("query entry {query} may attend to nothing")]
    EmptyVisibility { query: usize },
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("token id {token} outside vocabulary of {vocab_size}")]
    InvalidToken { token: TokenId, vocab_size: usize },
    #[error("bad weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Scalar: Float + LinalgScalar + Debug + Send + Sync {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn cast<F: Float>(x: f64) -> F {
    F::from(x).expect("float conversion")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub mask: TokenId,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            pad: 0,
            bos: 1,
            eos: 2,
            mask: 3,
        }
    }
}

impl SpecialTokens {
    /// Smallest id not taken by a special token under the default assignment.
    pub const FIRST_ORDINARY: TokenId = 4;

    fn ids(&self) -> [TokenId; 4] {
        [self.pad, self.bos, self.eos, self.mask]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub d_ff: usize,
    pub theta_base: f64,
    pub init_seed: u64,
    pub special: SpecialTokens,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            num_heads: 4,
            num_layers: 2,
            d_ff: 256,
            theta_base: DEFAULT_THETA_BASE,
            init_seed: 0,
            special: SpecialTokens::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn rope(&self) -> Result<RopeParams, ModelError> {
        Ok(RopeParams::new(self.head_dim(), self.theta_base)?)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(ModelError::DimensionMismatch(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.d_ff == 0 {
            return Err(ModelError::DimensionMismatch(
                "num_layers and d_ff must be positive".into(),
            ));
        }
        self.rope()?;
        let ids = self.special.ids();
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.vocab_size {
                return Err(ModelError::InvalidToken {
                    token: id,
                    vocab_size: self.vocab_size,
                });
            }
            if ids[..i].contains(&id) {
                return Err(ModelError::DimensionMismatch(format!(
                    "special token id {id} assigned twice"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F> {
    pub attn_norm: Array1<F>,
    /// Projections act on row vectors: `q = a · wq`.
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub mlp_norm: Array1<F>,
    pub w1: Array2<F>,
    pub w2: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<F = f32> {
    pub config: ModelConfig,
    /// `vocab_size × d_model`; also the output head.
    pub embedding: Array2<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Array1<F>,
}

impl<F: Scalar> ModelWeights<F> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerWeights {
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::zeros(d),
            w1: Array2::zeros((d, config.d_ff)),
            w2: Array2::zeros((config.d_ff, d)),
        };
        Self {
            config: config.clone(),
            embedding: Array2::zeros((config.vocab_size, d)),
            layers: vec![layer; config.num_layers],
            final_norm: Array1::zeros(d),
        }
    }

    /// Parameter tensors in serialization order.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![self.embedding.as_slice().expect("standard layout")];
        for l in &self.layers {
            out.push(l.attn_norm.as_slice().expect("standard layout"));
            for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
                out.push(m.as_slice().expect("standard layout"));
            }
            out.push(l.mlp_norm.as_slice().expect("standard layout"));
            out.push(l.w1.as_slice().expect("standard layout"));
            out.push(l.w2.as_slice().expect("standard layout"));
        }
        out.push(self.final_norm.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            out.push(l.attn_norm.as_slice_mut().expect("standard layout"));
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                out.push(m.as_slice_mut().expect("standard layout"));
            }
            out.push(l.mlp_norm.as_slice_mut().expect("standard layout"));
            out.push(l.w1.as_slice_mut().expect("standard layout"));
            out.push(l.w2.as_slice_mut().expect("standard layout"));
        }
        out.push(self.final_norm.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter at a flat index over [`Self::tensors`].
    pub fn param(&self, index: usize) -> F {
        let mut i = index;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn param_mut(&mut self, index: usize) -> &mut F {
        let mut i = index;
        for t in self.tensors_mut() {
            if i < t.len() {
                return &mut t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn cast<G: Scalar>(&self) -> ModelWeights<G> {
        let mut out = ModelWeights::<G>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = G::from(*s).expect("float conversion");
            }
        }
        out
    }

    /// `self -= lr * grad`.
    pub fn sgd_update(&mut self, grad: &ModelWeights<F>, lr: F) {
        for (w, g) in self.tensors_mut().into_iter().zip(grad.tensors()) {
            for (w, g) in w.iter_mut().zip(g) {
                *w = *w - lr * *g;
            }
        }
    }
}

/// Seeded Normal(0, 0.02) initialization; gains start at one.
pub fn init_weights(config: &ModelConfig) -> Result<ModelWeights<f32>, ModelError> {
    random_weights(config, INIT_STD)
}

/// [`init_weights`] with a caller-chosen standard deviation.
pub fn random_weights(config: &ModelConfig, std: f64) -> Result<ModelWeights<f32>, ModelError> {
    config.validate()?;
    if !std.is_finite() || std <= 0.0 {
        return Err(ModelError::BadWeights(format!("init std {std} must be positive")));
    }
    let mut w = ModelWeights::<f32>::zeros(config);
    // ChaCha8 keyed by the seed; tensors are filled in serialization order,
    // normalization gains are set to one and consume no draws.
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let normal = Normal::new(0.0f32, std as f32).expect("valid normal");
    let mut fill = |m: &mut Array2<f32>| m.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
    fill(&mut w.embedding);
    for l in &mut w.layers {
        l.attn_norm.fill(1.0);
        fill(&mut l.wq);
        fill(&mut l.wk);
        fill(&mut l.wv);
        fill(&mut l.wo);
        l.mlp_norm.fill(1.0);
        fill(&mut l.w1);
        fill(&mut l.w2);
    }
    w.final_norm.fill(1.0);
    Ok(w)
}

impl ModelWeights<f32> {
    /// Serialized weights file.
    ///
    /// Layout (all little-endian): magic `EDLM`; version `u32`; `vocab_size`,
    /// `d_model`, `num_heads`, `num_layers`, `d_ff` as `u32`; `theta_base` as
    /// `f64`; `init_seed` as `u64`; special ids `pad`, `bos`, `eos`, `mask` as
    /// `u32`; every tensor of [`Self::tensors`] as raw `f32`, row-major; a
    /// trailing SHA-256 digest of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(64 + 4 * self.parameter_count() + 32);
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [c.vocab_size, c.d_model, c.num_heads, c.num_layers, c.d_ff] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.theta_base.to_le_bytes());
        buf.extend_from_slice(&c.init_seed.to_le_bytes());
        for id in c.special.ids() {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for t in self.tensors() {
            for x in t {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        const HEADER: usize = 4 + 4 + 5 * 4 + 8 + 8 + 4 * 4;
        let bad = |m: &str| ModelError::BadWeights(m.to_string());
        if bytes.len() < HEADER + 32 {
            return Err(bad("file too short"));
        }
        if &bytes[..4] != WEIGHTS_MAGIC {
            return Err(bad("missing EDLM magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut cursor = 4;
        let mut take = |n: usize| {
            let out = &body[cursor..cursor + n];
            cursor += n;
            out
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4));
        if version != WEIGHTS_VERSION {
            return Err(ModelError::BadWeights(format!("unsupported version {version}")));
        }
        let dims: Vec<usize> = (0..5).map(|_| u32_at(take(4)) as usize).collect();
        let theta_base = f64::from_le_bytes(take(8).try_into().expect("8 bytes"));
        let init_seed = u64::from_le_bytes(take(8).try_into().expect("8 bytes"));
        let ids: Vec<u32> = (0..4).map(|_| u32_at(take(4))).collect();
        let config = ModelConfig {
            vocab_size: dims[0],
            d_model: dims[1],
            num_heads: dims[2],
            num_layers: dims[3],
            d_ff: dims[4],
            theta_base,
            init_seed,
            special: SpecialTokens {
                pad: ids[0],
                bos: ids[1],
                eos: ids[2],
                mask: ids[3],
            },
        };
        config
            .validate()
            .map_err(|e| ModelError::BadWeights(format!("invalid config: {e}")))?;
        let mut w = ModelWeights::<f32>::zeros(&config);
        let payload = &body[HEADER..];
        if payload.len() != 4 * w.parameter_count() {
            return Err(ModelError::BadWeights(format!(
                "expected {} parameter bytes, found {}",
                4 * w.parameter_count(),
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        for t in w.tensors_mut() {
            for x in t.iter_mut() {
                *x = values.next().expect("length checked");
            }
        }
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized parameters.
    pub fn checksum(&self) -> String {
        let bytes = self.to_bytes();
        bytes[bytes.len() - 32..].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which keys each query entry may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visibility {
    n: usize,
    allowed: Vec<bool>,
}

impl Visibility {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for q in 0..n {
            for k in 0..n {
                allowed.push(f(q, k));
            }
        }
        Self { n, allowed }
    }

    /// Full bidirectional visibility, except that under
    /// [`AnchorAttention::MainOnlySees`] the anchor's query sees only itself.
    pub fn for_layout(selection: &LayoutSelection, anchor: Option<AnchorAttention>) -> Self {
        let n = selection.len();
        let mut vis = Self::full(n);
        if let (Some(a), Some(AnchorAttention::MainOnlySees)) = (selection.anchor_index(), anchor) {
            for k in 0..n {
                vis.set(a, k, k == a);
            }
        }
        vis
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }

    pub fn set(&mut self, query: usize, key: usize, allowed: bool) {
        self.allowed[query * self.n + key] = allowed;
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.allowed[query * self.n..(query + 1) * self.n]
    }

    /// Applies a permutation: entry `i` of the result is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.n, |q, k| self.allows(perm[q], perm[k]))
    }
}

/// One forward pass worth of per-entry inputs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardInputs<'a> {
    pub tokens: &'a [TokenId],
    pub coordinates: &'a [usize],
    pub visibility: &'a Visibility,
}

impl ForwardInputs<'_> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn check(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(ModelError::DimensionMismatch("empty input".into()));
        }
        if self.coordinates.len() != n || self.visibility.len() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "{} tokens, {} coordinates, visibility over {}",
                n,
                self.coordinates.len(),
                self.visibility.len()
            )));
        }
        if let Some(&token) = self.tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(ModelError::InvalidToken {
                token,
                vocab_size: config.vocab_size,
            });
        }
        for q in 0..n {
            if !self.visibility.row(q).iter().any(|&b| b) {
                return Err(ModelError::EmptyVisibility { query: q });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache<F> {
    pub x_in: Array2<F>,
    pub inv_rms1: Array1<F>,
    pub a: Array2<F>,
    /// Rotated queries and keys.
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Attention probabilities per head, `n × n`.
    pub probs: Vec<Array2<F>>,
    pub attn: Array2<F>,
    pub x_mid: Array2<F>,
    pub inv_rms2: Array1<F>,
    pub b: Array2<F>,
    pub h_pre: Array2<F>,
    pub h_act: Array2<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache<F> {
    pub layers: Vec<LayerCache<F>>,
    pub x_final: Array2<F>,
    pub inv_rms_f: Array1<F>,
    pub y: Array2<F>,
    pub rope: RopeTable<F>,
    pub logits: Array2<F>,
}

fn rms_norm<F: Scalar>(x: &Array2<F>, gain: &Array1<F>) -> (Array2<F>, Array1<F>) {
    let d = cast::<F>(x.ncols() as f64);
    let eps = cast::<F>(RMS_EPS);
    let mut out = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        let r = F::one() / (ms + eps).sqrt();
        inv[i] = r;
        for (v, &g) in row.iter_mut().zip(gain) {
            *v = *v * r * g;
        }
    }
    (out, inv)
}

fn rms_norm_backward<F: Scalar>(
    x: &Array2<F>,
    inv_rms: &Array1<F>,
    gain: &Array1<F>,
    d_out: &Array2<F>,
    d_gain: &mut Array1<F>,
) -> Array2<F> {
    let d = cast::<F>(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let r = inv_rms[i];
        let xr = x.row(i);
        let dy = d_out.row(i);
        let mut dot = F::zero();
        for j in 0..x.ncols() {
            let gdy = gain[j] * dy[j];
            d_gain[j] = d_gain[j] + dy[j] * xr[j] * r;
            dot = dot + gdy * xr[j];
        }
        let coef = dot * r * r * r / d;
        for j in 0..x.ncols() {
            dx[[i, j]] = gain[j] * dy[j] * r - xr[j] * coef;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<F: Scalar>(x: F) -> F {
    let half = cast::<F>(0.5);
    let u = cast::<F>(GELU_C) * (x + cast::<F>(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = cast::<F>(0.5);
    let c = cast::<F>(GELU_C);
    let a = cast::<F>(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + cast::<F>(3.0) * a * x * x)
}

fn apply_rope<F: Scalar>(m: &mut Array2<F>, table: &RopeTable<F>, num_heads: usize, head_dim: usize, inverse: bool) {
    for (i, mut row) in m.outer_iter_mut().enumerate() {
        let row = row.as_slice_mut().expect("standard layout");
        for h in 0..num_heads {
            let slice = &mut row[h * head_dim..(h + 1) * head_dim];
            if inverse {
                table.apply_inverse(i, slice);
            } else {
                table.apply(i, slice);
            }
        }
    }
}

fn softmax_rows<F: Scalar>(scores: &mut Array2<F>, visibility: &Visibility) {
    for (q, mut row) in scores.outer_iter_mut().enumerate() {
        let vis = visibility.row(q);
        let mut max = F::neg_infinity();
        for (s, &ok) in row.iter().zip(vis) {
            if ok && *s > max {
                max = *s;
            }
        }
        let mut sum = F::zero();
        for (s, &ok) in row.iter_mut().zip(vis) {
            *s = if ok { (*s - max).exp() } else { F::zero() };
            sum = sum + *s;
        }
        for s in row.iter_mut() {
            *s = *s / sum;
        }
    }
}

pub(crate) fn forward_cached<F: Scalar>(
    weights: &ModelWeights<F>,
    inputs: &ForwardInputs<'_>,
) -> Result<ForwardCache<F>, ModelError> {
    let config = &weights.config;
    inputs.check(config)?;
    let n = inputs.len();
    let d = config.d_model;
    let nh = config.num_heads;
    let hd = config.head_dim();
    let rope = RopeTable::<F>::new(&config.rope()?, inputs.coordinates);
    let scale = cast::<F>(1.0 / (hd as f64).sqrt());

    let mut x = Array2::<F>::zeros((n, d));
    for (i, &t) in inputs.tokens.iter().enumerate() {
        x.row_mut(i).assign(&weights.embedding.row(t as usize));
    }

    let mut layers = Vec::with_capacity(config.num_layers);
    for lw in &weights.layers {
        let x_in = x;
        let (a, inv_rms1) = rms_norm(&x_in, &lw.attn_norm);
        let mut q = a.dot(&lw.wq);
        let mut k = a.dot(&lw.wk);
        let v = a.dot(&lw.wv);
        apply_rope(&mut q, &rope, nh, hd, false);
        apply_rope(&mut k, &rope, nh, hd, false);

        let mut attn = Array2::<F>::zeros((n, d));
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let cols = s![.., h * hd..(h + 1) * hd];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            p.mapv_inplace(|x| x * scale);
            softmax_rows(&mut p, inputs.visibility);
            attn.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let x_mid = &x_in + &attn.dot(&lw.wo);
        let (b, inv_rms2) = rms_norm(&x_mid, &lw.mlp_norm);
        let h_pre = b.dot(&lw.w1);
        let h_act = h_pre.mapv(gelu);
        let x_out = &x_mid + &h_act.dot(&lw.w2);
        layers.push(LayerCache {
            x_in,
            inv_rms1,
            a,
            q,
            k,
            v,
            probs,
            attn,
            x_mid,
            inv_rms2,
            b,
            h_pre,
            h_act,
        });
        x = x_out;
    }
    let (y, inv_rms_f) = rms_norm(&x, &weights.final_norm);
    let logits = y.dot(&weights.embedding.t());
    Ok(ForwardCache {
        layers,
        x_final: x,
        inv_rms_f,
        y,
        rope,
        logits,
    })
}

/// Gradients of a scalar loss with respect to every parameter, given
/// `d_logits = dL/dlogits` for the cached pass.
pub(crate) fn backward<F: Scalar>(
    weights: &ModelWeights<F>,
    cache: &ForwardCache<F>,
    tokens: &[TokenId],
    d_logits: ArrayView2<'_, F>,
    grad: &mut ModelWeights<F>,
) {
    let config = &weights.config;
    let nh = config.num_heads;
    let hd = config.head_dim();
    let scale = cast::<F>(1.0 / (hd as f64).sqrt());

    // Tied head: logits = y · Eᵀ.
    grad.embedding = &grad.embedding + &d_logits.t().dot(&cache.y);
    let dy = d_logits.dot(&weights.embedding);
    let mut dx = rms_norm_backward(
        &cache.x_final,
        &cache.inv_rms_f,
        &weights.final_norm,
        &dy,
        &mut grad.final_norm,
    );

    for (li, (lw, lc)) in weights.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut grad.layers[li];
        // MLP residual branch.
        lg.w2 = &lg.w2 + &lc.h_act.t().dot(&dx);
        let mut dh = dx.dot(&lw.w2.t());
        ndarray::Zip::from(&mut dh)
            .and(&lc.h_pre)
            .for_each(|g, &x| *g = *g * gelu_grad(x));
        lg.w1 = &lg.w1 + &lc.b.t().dot(&dh);
        let db = dh.dot(&lw.w1.t());
        let d_mid = &dx + &rms_norm_backward(&lc.x_mid, &lc.inv_rms2, &lw.mlp_norm, &db, &mut lg.mlp_norm);

        // Attention residual branch.
        lg.wo = &lg.wo + &lc.attn.t().dot(&d_mid);
        let d_attn = d_mid.dot(&lw.wo.t());
        let mut dq = Array2::<F>::zeros(lc.q.raw_dim());
        let mut dk = Array2::<F>::zeros(lc.k.raw_dim());
        let mut dv = Array2::<F>::zeros(lc.v.raw_dim());
        for h in 0..nh {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &lc.probs[h];
            let d_out = d_attn.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            let dp = d_out.dot(&lc.v.slice(cols).t());
            // Softmax Jacobian, row by row; masked entries have p = 0.
            let mut ds = &dp * p;
            let row_dot = ds.sum_axis(Axis(1));
            for (i, mut row) in ds.outer_iter_mut().enumerate() {
                for (j, val) in row.iter_mut().enumerate() {
                    *val = (*val - p[[i, j]] * row_dot[i]) * scale;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        apply_rope(&mut dq, &cache.rope, nh, hd, true);
        apply_rope(&mut dk, &cache.rope, nh, hd, true);
        lg.wq = &lg.wq + &lc.a.t().dot(&dq);
        lg.wk = &lg.wk + &lc.a.t().dot(&dk);
        lg.wv = &lg.wv + &lc.a.t().dot(&dv);
        let da = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        dx = &d_mid + &rms_norm_backward(&lc.x_in, &lc.inv_rms1, &lw.attn_norm, &da, &mut lg.attn_norm);
    }

    for (i, &t) in tokens.iter().enumerate() {
        let mut row = grad.embedding.row_mut(t as usize);
        row.zip_mut_with(&dx.row(i), |g, &d| *g = *g + d);
    }
}

/// Vocabulary logits for every layout entry.
pub fn forward<F: Scalar>(weights: &ModelWeights<F>, inputs: &ForwardInputs<'_>) -> Result<Array2<F>, ModelError> {
    Ok(forward_cached(weights, inputs)?.logits)
}

/// Row-stochastic attention probabilities of one head in one layer.
pub fn capture_attention<F: Scalar>(
    weights: &ModelWeights<F>,
    inputs: &ForwardInputs<'_>,
    layer: usize,
    head: usize,
) -> Result<Array2<F>, ModelError> {
    let c = &weights.config;
    if layer >= c.num_layers {
        return Err(ModelError::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: c.num_layers,
        });
    }
    if head >= c.num_heads {
        return Err(ModelError::IndexOutOfRange {
            what: "head",
            index: head,
            limit: c.num_heads,
        });
    }
    let mut cache = forward_cached(weights, inputs)?;
    Ok(cache.layers.swap_remove(layer).probs.swap_remove(head))
}

/// Residual-stream vectors after `layer` blocks; layer 0 is the embedding output.
pub fn capture_hidden<F: Scalar>(
    weights: &ModelWeights<F>,
    inputs: &ForwardInputs<'_>,
    layer: usize,
) -> Result<Array2<F>, ModelError> {
    let c = &weights.config;
    if layer > c.num_layers {
        return Err(ModelError::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: c.num_layers + 1,
        });
    }
    let mut cache = forward_cached(weights, inputs)?;
    Ok(if layer == c.num_layers {
        cache.x_final
    } else {
        cache.layers.swap_remove(layer).x_in
    })
}
