// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small pre-LayerNorm decoder-only transformer with per-site hooks.
//!
//! Each layer computes
//! ```text
//! a = Attn(LN₁(x))     -> ATTN site
//! x = x + a
//! m = FFN(LN₂(x))      -> MLP site
//! x = x + m            -> INT_LAYER site
//! ```
//! followed by a final LayerNorm and an untied output head. All arithmetic
//! is f64; checkpoints store f32, and training rounds parameters to f32 at
//! the end so a saved model reloads bit-identically.

mod generate;
mod train;

pub use generate::{
    generate, GenerateOptions, Generation, InterventionMode, InterventionPlan, PrefillRecord, SiteEvent,
    SiteTrace, TokenTrace,
};
pub use train::{train_toy_lm, LmTrainConfig, LmTrainHistory};

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Vector};
use crate::probe::read_u32;
use crate::site::Site;

const LN_EPS: f64 = 1e-5;

/// Word-level vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Empty("vocabulary"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::OutOfVocab(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::OutOfVocab(format!("#{id}")))
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub context_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 256,
            context_len: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::InvalidArgument("n_layers must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.embed_dim == 0 || self.n_heads == 0 || self.ffn_dim == 0 || self.context_len == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub off: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub(crate) fn range(&self) -> std::ops::Range<usize> {
        self.off..self.off + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_1: Slot,
    pub b_1: Slot,
    pub w_2: Slot,
    pub b_2: Slot,
}

/// Offsets of every parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok: Slot,
    pub pos: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
    pub total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut off = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { off, rows, cols };
            off += rows * cols;
            s
        };
        let d = c.embed_dim;
        let tok = slot(c.vocab_size, d);
        let pos = slot(c.context_len, d);
        let layers = (0..c.n_layers)
            .map(|_| LayerSlots {
                ln1_g: slot(1, d),
                ln1_b: slot(1, d),
                w_qkv: slot(d, 3 * d),
                b_qkv: slot(1, 3 * d),
                w_o: slot(d, d),
                b_o: slot(1, d),
                ln2_g: slot(1, d),
                ln2_b: slot(1, d),
                w_1: slot(d, c.ffn_dim),
                b_1: slot(1, c.ffn_dim),
                w_2: slot(c.ffn_dim, d),
                b_2: slot(1, d),
            })
            .collect();
        let lnf_g = slot(1, d);
        let lnf_b = slot(1, d);
        let w_out = slot(d, c.vocab_size);
        let b_out = slot(1, c.vocab_size);
        Self {
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: off,
        }
    }
}

pub(crate) fn mat(data: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &data[s.range()]).expect("slot shape")
}

pub(crate) fn row(data: &[f64], s: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&data[s.range()])
}

pub(crate) fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut r, sd) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = r.sum() / n;
        r.mapv_inplace(|v| v - mean);
        let var = r.iter().map(|v| v * v).sum::<f64>() / n;
        *sd = 1.0 / (var + LN_EPS).sqrt();
        let k = *sd;
        r.mapv_inplace(|v| v * k);
    }
    let y = &xhat * &g + b;
    (y, xhat, rstd)
}

/// Causal multi-head attention over one contiguous sequence given its
/// packed `[q | k | v]` projections. Returns the concatenated head outputs
/// and, if requested, each head's attention matrix.
pub(crate) fn causal_attention(
    qkv: ArrayView2<f64>,
    n_heads: usize,
    keep_probs: bool,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let t = qkv.nrows();
    let d = qkv.ncols() / 3;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((t, d));
    let mut all_probs = Vec::new();
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
        let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
        let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
        let mut p = q.dot(&k.t());
        for i in 0..t {
            let mut r = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                r[j] *= scale;
                max = max.max(r[j]);
            }
            let mut sum = 0.0;
            for j in 0..=i {
                r[j] = (r[j] - max).exp();
                sum += r[j];
            }
            for j in 0..t {
                r[j] = if j <= i { r[j] / sum } else { 0.0 };
            }
        }
        ctx.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
        if keep_probs {
            all_probs.push(p);
        }
    }
    (ctx, all_probs)
}

pub(crate) fn softmax_row(logits: ArrayView1<f64>) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mutable access to one (layer, site) activation matrix (rows = positions).
pub type Hook<'h> = dyn FnMut(usize, Site, &mut Array2<f64>) -> Result<()> + 'h;

/// Activations keyed by (layer, site, position).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptureSet {
    pub states: BTreeMap<(usize, Site, usize), Vector>,
}

impl CaptureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, layer: usize, site: Site, position: usize) -> Option<&Vector> {
        self.states.get(&(layer, site, position))
    }

    pub fn insert(&mut self, layer: usize, site: Site, position: usize, v: Vector) {
        self.states.insert((layer, site, position), v);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn write_rows(m: &mut Array2<f64>, layer: usize, site: Site, overrides: &CaptureSet) {
    for ((l, s, p), v) in overrides.states.range((layer, site, 0)..=(layer, site, usize::MAX)) {
        debug_assert!(*l == layer && *s == site);
        if *p < m.nrows() {
            m.row_mut(*p).assign(&ArrayView1::from(v.as_slice()));
        }
    }
}

fn capture_rows(m: &Array2<f64>, layer: usize, site: Site, into: &mut CaptureSet) -> Result<()> {
    for (p, r) in m.rows().into_iter().enumerate() {
        into.insert(layer, site, p, Vector::new(r.to_vec())?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    vocab: Vocab,
    params: Vec<f64>,
    layout: Layout,
}

impl ToyModel {
    /// Randomly initialized model: N(0, 0.02²) weights, residual output
    /// projections scaled by 1/√(2·n_layers), unit LayerNorm gains.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} tokens but config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = RngStream::new(seed);
        let mut fill = |params: &mut Vec<f64>, s: Slot, std: f64| {
            for p in &mut params[s.range()] {
                *p = std * rng.standard_normal();
            }
        };
        let base = 0.02;
        let resid = base / (2.0 * config.n_layers as f64).sqrt();
        fill(&mut params, layout.tok, base);
        fill(&mut params, layout.pos, base);
        for ls in &layout.layers {
            fill(&mut params, ls.w_qkv, base);
            fill(&mut params, ls.w_o, resid);
            fill(&mut params, ls.w_1, base);
            fill(&mut params, ls.w_2, resid);
            params[ls.ln1_g.range()].fill(1.0);
            params[ls.ln2_g.range()].fill(1.0);
        }
        params[layout.lnf_g.range()].fill(1.0);
        fill(&mut params, layout.w_out, base);
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Rounds every parameter to the nearest f32.
    pub fn quantize(&mut self) {
        for p in &mut self.params {
            *p = f64::from(*p as f32);
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                context: self.config.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::OutOfVocab(format!("#{bad}")));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[usize]) -> Array2<f64> {
        let d = self.config.embed_dim;
        let tok = mat(&self.params, self.layout.tok);
        let pos = mat(&self.params, self.layout.pos);
        let mut x = Array2::zeros((tokens.len(), d));
        for (i, &t) in tokens.iter().enumerate() {
            let mut r = x.row_mut(i);
            r.assign(&tok.row(t));
            r += &pos.row(i);
        }
        x
    }

    fn layer(&self, l: usize, x: &mut Array2<f64>, hook: &mut Hook) -> Result<()> {
        let ls = &self.layout.layers[l];
        let p = &self.params;
        let (n1, _, _) = layer_norm(x, row(p, ls.ln1_g), row(p, ls.ln1_b));
        let qkv = n1.dot(&mat(p, ls.w_qkv)) + row(p, ls.b_qkv);
        let (ctx, _) = causal_attention(qkv.view(), self.config.n_heads, false);
        let mut a = ctx.dot(&mat(p, ls.w_o)) + row(p, ls.b_o);
        hook(l, Site::Attn, &mut a)?;
        *x += &a;
        let (n2, _, _) = layer_norm(x, row(p, ls.ln2_g), row(p, ls.ln2_b));
        let mut u = n2.dot(&mat(p, ls.w_1)) + row(p, ls.b_1);
        u.mapv_inplace(|v| v.max(0.0));
        let mut m = u.dot(&mat(p, ls.w_2)) + row(p, ls.b_2);
        hook(l, Site::Mlp, &mut m)?;
        *x += &m;
        hook(l, Site::IntLayer, x)
    }

    fn head(&self, x: &Array2<f64>) -> Array2<f64> {
        let p = &self.params;
        let (nf, _, _) = layer_norm(x, row(p, self.layout.lnf_g), row(p, self.layout.lnf_b));
        nf.dot(&mat(p, self.layout.w_out)) + row(p, self.layout.b_out)
    }

    /// Full forward pass returning logits for every position. `hook` sees
    /// each site's activation matrix and may modify it in place.
    pub fn forward_hooked(&self, tokens: &[usize], hook: &mut Hook) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        let mut x = self.embed(tokens);
        for l in 0..self.config.n_layers {
            self.layer(l, &mut x, hook)?;
        }
        Ok(self.head(&x))
    }

    /// Runs layers `0..=last_layer` only and returns the INT_LAYER matrix of
    /// `last_layer`; cheaper when only an intermediate activation is needed.
    pub fn forward_until(&self, tokens: &[usize], last_layer: usize, hook: &mut Hook) -> Result<Array2<f64>> {
        self.check_tokens(tokens)?;
        if last_layer >= self.config.n_layers {
            return Err(Error::InvalidArgument(format!("layer {last_layer} out of range")));
        }
        let mut x = self.embed(tokens);
        for l in 0..=last_layer {
            self.layer(l, &mut x, hook)?;
        }
        Ok(x)
    }

    /// Logits for every position.
    pub fn logits(&self, tokens: &[usize]) -> Result<Array2<f64>> {
        self.forward_hooked(tokens, &mut |_, _, _| Ok(()))
    }

    /// Next-token distribution at the last position plus every activation.
    pub fn forward_with_capture(&self, tokens: &[usize]) -> Result<(Vec<f64>, CaptureSet)> {
        self.forward_with_overrides(tokens, &CaptureSet::new())
    }

    /// Like [`forward_with_capture`](Self::forward_with_capture), but each
    /// entry of `overrides` replaces the corresponding activation before the
    /// pass continues. The returned capture holds the post-override values.
    pub fn forward_with_overrides(&self, tokens: &[usize], overrides: &CaptureSet) -> Result<(Vec<f64>, CaptureSet)> {
        let mut cap = CaptureSet::new();
        let logits = self.forward_hooked(tokens, &mut |l, s, m| {
            write_rows(m, l, s, overrides);
            capture_rows(m, l, s, &mut cap)
        })?;
        Ok((softmax_row(logits.row(tokens.len() - 1)), cap))
    }

    /// Recomputes layers `layer+1..` (and the head) from the layer-`layer`
    /// INT_LAYER states in `states` for positions `0..=position`.
    pub fn resume_from_layer(&self, layer: usize, states: &CaptureSet, position: usize) -> Result<Vec<f64>> {
        if layer >= self.config.n_layers {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        if position >= self.config.context_len {
            return Err(Error::ContextOverflow {
                len: position + 1,
                context: self.config.context_len,
            });
        }
        let d = self.config.embed_dim;
        let mut x = Array2::zeros((position + 1, d));
        for p in 0..=position {
            let v = states
                .get(layer, Site::IntLayer, p)
                .ok_or(Error::MissingOverride { layer, position: p })?;
            if v.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.dim() });
            }
            x.row_mut(p).assign(&ArrayView1::from(v.as_slice()));
        }
        let mut noop = |_: usize, _: Site, _: &mut Array2<f64>| Ok(());
        for l in layer + 1..self.config.n_layers {
            self.layer(l, &mut x, &mut noop)?;
        }
        Ok(softmax_row(self.head(&x).row(position)))
    }

    /// `exp` of the mean next-token negative log-likelihood of tokens `2..n`.
    pub fn perplexity(&self, tokens: &[usize]) -> Result<f64> {
        Ok(self.nll(tokens)?.0.exp())
    }

    /// Mean NLL (nats) of tokens `2..n` and the number of predicted tokens.
    pub fn nll(&self, tokens: &[usize]) -> Result<(f64, usize)> {
        if tokens.len() < 2 {
            return Err(Error::InvalidArgument("perplexity needs at least 2 tokens".into()));
        }
        let logits = self.logits(tokens)?;
        let mut total = 0.0;
        for i in 0..tokens.len() - 1 {
            let r = logits.row(i);
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - r[tokens[i + 1]];
        }
        let n = tokens.len() - 1;
        Ok((total / n as f64, n))
    }

    /// Greedy next token (ties go to the lowest id).
    pub fn argmax(dist: ArrayView1<f64>) -> usize {
        dist.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }

    /// Plain greedy decoding with no intervention.
    pub fn greedy(&self, prompt: &[usize], max_new: usize, eos: Option<usize>) -> Result<Vec<usize>> {
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if tokens.len() >= self.config.context_len {
                break;
            }
            let logits = self.logits(&tokens)?;
            let next = Self::argmax(logits.row(tokens.len() - 1));
            tokens.push(next);
            out.push(next);
            if Some(next) == eos {
                break;
            }
        }
        Ok(out)
    }

    pub const MAGIC: &'static [u8; 6] = b"TOYLM1";
    pub const VERSION: u32 = 1;

    /// `magic | version u32 | vocab_size, embed_dim, n_layers, n_heads, ffn_dim,
    /// context_len (u32 each) | per token: len u16 + utf-8 | n_params u64 | f32 params`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        let c = &self.config;
        for v in [c.vocab_size, c.embed_dim, c.n_layers, c.n_heads, c.ffn_dim, c.context_len] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for t in self.vocab.tokens() {
            let len = u16::try_from(t.len()).map_err(|_| Error::InvalidArgument("token too long".into()))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(t.as_bytes())?;
        }
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for p in &self.params {
            buf.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(|_| Error::TruncatedHeader)?;
        if &magic != Self::MAGIC {
            return Err(Error::BadMagic { expected: "TOYLM1" });
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(Error::VersionMismatch {
                expected: Self::VERSION,
                found: version,
            });
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            embed_dim: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            ffn_dim: dims[4],
            context_len: dims[5],
        };
        config.validate()?;
        let mut tokens = Vec::with_capacity(config.vocab_size.min(1 << 16));
        for _ in 0..config.vocab_size {
            let mut len = [0u8; 2];
            r.read_exact(&mut len).map_err(|_| Error::TruncatedHeader)?;
            let mut bytes = vec![0u8; u16::from_le_bytes(len) as usize];
            r.read_exact(&mut bytes).map_err(|_| Error::TruncatedHeader)?;
            tokens.push(String::from_utf8(bytes).map_err(|_| Error::InvalidArgument("token is not utf-8".into()))?);
        }
        let vocab = Vocab::new(tokens)?;
        let layout = Layout::new(&config);
        let mut n = [0u8; 8];
        r.read_exact(&mut n).map_err(|_| Error::TruncatedHeader)?;
        let n = u64::from_le_bytes(n) as usize;
        if n != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                got: n,
            });
        }
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|_| Error::TruncatedRecord(0))?;
        let params = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Sum over the last axis, kept for the training code.
pub(crate) fn col_sums(m: &Array2<f64>) -> Array1<f64> {
    m.sum_axis(Axis(0))
}
