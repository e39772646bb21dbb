//! Windowed embedding-MLP autoregressive language model with analytic
//! gradients.
//!
//! Logit row `t` is the next-token distribution for the token *at* position
//! `t`, computed from the `window` tokens at `t-window..t` that lie in the
//! same segment. Slots reaching before the segment start read a virtual BOS.
//!
//! ```text
//! h      = tanh(W1 · [E[c_0]; …; E[c_{w-1}]] + b1)
//! logits = W2 · h + b2
//! ```
//!
//! Because the first layer is linear in the concatenated embeddings, the
//! forward pass goes through a per-slot projection table `P_s = W1_s · Eᵀ`,
//! and the backward pass accumulates gradients per `(slot, token)` before
//! folding them into `W1` and `E` once per batch.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::BOS;
use crate::error::{NpdError, Result};
use crate::io::{self, LeReader, LeWriter};

const CKPT_MAGIC: &[u8; 8] = b"NPDCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// Parameter tensors in checkpoint declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    Embed,
    W1,
    B1,
    W2,
    B2,
}

impl Tensor {
    pub const ALL: [Tensor; 5] = [Tensor::Embed, Tensor::W1, Tensor::B1, Tensor::W2, Tensor::B2];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::Embed => "E",
            Tensor::W1 => "W1",
            Tensor::B1 => "b1",
            Tensor::W2 => "W2",
            Tensor::B2 => "b2",
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 8 || self.window == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(NpdError::Config(format!("invalid model dims {self:?}")));
        }
        if self.vocab_size > u32::MAX as usize || self.hidden_dim > u32::MAX as usize {
            return Err(NpdError::Config("model dims exceed u32".into()));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.window * self.embed_dim
    }

    pub fn range(&self, t: Tensor) -> Range<usize> {
        let v = self.vocab_size;
        let e = v * self.embed_dim;
        let w1 = e + self.hidden_dim * self.input_dim();
        let b1 = w1 + self.hidden_dim;
        let w2 = b1 + v * self.hidden_dim;
        let b2 = w2 + v;
        match t {
            Tensor::Embed => 0..e,
            Tensor::W1 => e..w1,
            Tensor::B1 => w1..b1,
            Tensor::W2 => b1..w2,
            Tensor::B2 => w2..b2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.range(Tensor::B2).end
    }
}

/// Complete parameter set of one policy, stored as one flat buffer in
/// declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLmParams {
    dims: ModelDims,
    data: Vec<f64>,
    version: u32,
}

impl TinyLmParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(TinyLmParams {
            dims,
            data: vec![0.0; dims.param_count()],
            version: 0,
        })
    }

    /// Uniform Xavier-style initialisation; biases start at zero.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit_w1 = (6.0 / (dims.input_dim() + dims.hidden_dim) as f64).sqrt();
        let limit_w2 = (6.0 / (dims.hidden_dim + dims.vocab_size) as f64).sqrt();
        for (t, limit) in [(Tensor::Embed, 1.0), (Tensor::W1, limit_w1), (Tensor::W2, limit_w2)] {
            for x in p.tensor_mut(t) {
                *x = rng.gen_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.dims.range(t)]
    }

    /// Direct parameter access; does not touch the policy version.
    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.dims.range(t);
        &mut self.data[r]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn encode(&self) -> Vec<u8> {
        let d = self.dims;
        let mut w = LeWriter::with_magic(CKPT_MAGIC);
        for x in [d.vocab_size, d.window, d.embed_dim, d.hidden_dim] {
            w.u32(x as u32);
        }
        w.u32(self.version);
        for &x in &self.data {
            w.f64(x);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::open(bytes, CKPT_MAGIC, "checkpoint")?;
        let dims = ModelDims {
            vocab_size: r.u32()? as usize,
            window: r.u32()? as usize,
            embed_dim: r.u32()? as usize,
            hidden_dim: r.u32()? as usize,
        };
        dims.validate()?;
        let version = r.u32()?;
        let n = dims.param_count();
        if r.remaining() != n * 8 {
            return Err(NpdError::Format(format!(
                "checkpoint: expected {} parameter bytes, found {}",
                n * 8,
                r.remaining()
            )));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.expect_end()?;
        Ok(TinyLmParams { dims, data, version })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&io::read_file(path)?)
    }

    /// CRC32 of the encoded checkpoint payload.
    pub fn checkpoint_crc(&self) -> u32 {
        LeReader::stored_crc(&self.encode())
    }
}

/// Gradient buffer with the same layout as [`TinyLmParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    dims: ModelDims,
    data: Vec<f64>,
}

impl Gradient {
    pub fn zeros(dims: ModelDims) -> Self {
        Gradient {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.dims.range(t)]
    }

    fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.dims.range(t);
        &mut self.data[r]
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Row-major `[rows × vocab]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRows {
    vocab: usize,
    data: Vec<f64>,
}

impl LogitRows {
    pub fn len(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.vocab)
    }
}

/// One token row plus its segment labels and (for losses) a mask of
/// supervised positions.
#[derive(Debug, Clone, Copy)]
pub struct SeqView<'a> {
    pub tokens: &'a [u32],
    pub segment_ids: &'a [u16],
    pub loss_mask: &'a [bool],
}

pub(crate) fn validate_sequence(vocab: usize, tokens: &[u32], segment_ids: &[u16]) -> Result<()> {
    if tokens.is_empty() {
        return Err(NpdError::Input("empty token sequence".into()));
    }
    if tokens.len() != segment_ids.len() {
        return Err(NpdError::Input(format!(
            "{} tokens but {} segment ids",
            tokens.len(),
            segment_ids.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(NpdError::Input(format!("token id {bad} >= vocab size {vocab}")));
    }
    if segment_ids.windows(2).any(|p| p[1] < p[0]) {
        return Err(NpdError::Input("segment ids decrease".into()));
    }
    Ok(())
}

/// Appends the context window of every position `t` with `select(t)` true.
pub(crate) fn push_contexts(
    window: usize,
    tokens: &[u32],
    segment_ids: &[u16],
    mut select: impl FnMut(usize) -> bool,
    out: &mut Vec<u32>,
) {
    let mut seg_start = 0;
    for t in 0..tokens.len() {
        if t > 0 && segment_ids[t] != segment_ids[t - 1] {
            seg_start = t;
        }
        if !select(t) {
            continue;
        }
        for s in 0..window {
            let p = t as isize - window as isize + s as isize;
            out.push(if p >= seg_start as isize { tokens[p as usize] } else { BOS });
        }
    }
}

/// Context window for predicting the token that follows `history`, treating
/// `history` as one segment.
pub(crate) fn tail_context(window: usize, history: &[u32], out: &mut [u32]) {
    let n = history.len();
    for (s, slot) in out.iter_mut().enumerate().take(window) {
        let p = n as isize - window as isize + s as isize;
        *slot = if p >= 0 { history[p as usize] } else { BOS };
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Writes `softmax(xs)` into `out` and returns `logsumexp(xs)`.
pub(crate) fn softmax_into(xs: &[f64], out: &mut [f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    m + z.ln()
}

/// Inference view over a parameter snapshot with its projection table built.
pub struct Evaluator<'a> {
    params: &'a TinyLmParams,
    // [slot][token][hidden]
    table: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(params: &'a TinyLmParams) -> Self {
        let d = params.dims;
        let (v, de, dh, din) = (d.vocab_size, d.embed_dim, d.hidden_dim, d.input_dim());
        let emb = params.tensor(Tensor::Embed);
        let w1 = params.tensor(Tensor::W1);
        let mut table = vec![0.0; d.window * v * dh];
        for s in 0..d.window {
            for tok in 0..v {
                let e = &emb[tok * de..(tok + 1) * de];
                let out = &mut table[(s * v + tok) * dh..(s * v + tok + 1) * dh];
                for (h, o) in out.iter_mut().enumerate() {
                    let row = &w1[h * din + s * de..h * din + (s + 1) * de];
                    *o = row.iter().zip(e).map(|(a, b)| a * b).sum();
                }
            }
        }
        Evaluator { params, table }
    }

    pub fn params(&self) -> &TinyLmParams {
        self.params
    }

    pub fn dims(&self) -> ModelDims {
        self.params.dims
    }

    fn hidden(&self, ctx: &[u32], h: &mut [f64]) {
        let d = self.params.dims;
        let (v, dh) = (d.vocab_size, d.hidden_dim);
        h.copy_from_slice(self.params.tensor(Tensor::B1));
        for (s, &tok) in ctx.iter().enumerate() {
            let row = &self.table[(s * v + tok as usize) * dh..(s * v + tok as usize + 1) * dh];
            for (a, b) in h.iter_mut().zip(row) {
                *a += b;
            }
        }
        for a in h.iter_mut() {
            *a = a.tanh();
        }
    }

    fn project_out(&self, h: &[f64], out: &mut [f64]) {
        let dh = self.params.dims.hidden_dim;
        let w2 = self.params.tensor(Tensor::W2);
        let b2 = self.params.tensor(Tensor::B2);
        for (vi, o) in out.iter_mut().enumerate() {
            let row = &w2[vi * dh..(vi + 1) * dh];
            *o = b2[vi] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Logits for one context window (`window` token ids, oldest first).
    pub fn context_logits(&self, ctx: &[u32], out: &mut [f64]) {
        let mut h = vec![0.0; self.params.dims.hidden_dim];
        self.hidden(ctx, &mut h);
        self.project_out(&h, out);
    }

    /// Logits predicting the token that follows `history` (one segment).
    pub fn next_logits(&self, history: &[u32], out: &mut [f64]) {
        let mut ctx = vec![0; self.params.dims.window];
        tail_context(self.params.dims.window, history, &mut ctx);
        self.context_logits(&ctx, out);
    }

    /// Logit rows at the positions where `select` is true, in position order.
    pub fn logits_where(
        &self,
        tokens: &[u32],
        segment_ids: &[u16],
        select: impl FnMut(usize) -> bool,
    ) -> Result<LogitRows> {
        let d = self.params.dims;
        validate_sequence(d.vocab_size, tokens, segment_ids)?;
        let mut ctx = Vec::new();
        push_contexts(d.window, tokens, segment_ids, select, &mut ctx);
        let n = ctx.len() / d.window;
        let mut data = vec![0.0; n * d.vocab_size];
        let mut h = vec![0.0; d.hidden_dim];
        for (c, out) in ctx.chunks_exact(d.window).zip(data.chunks_exact_mut(d.vocab_size)) {
            self.hidden(c, &mut h);
            self.project_out(&h, out);
        }
        Ok(LogitRows {
            vocab: d.vocab_size,
            data,
        })
    }

    /// Mean cross-entropy of the masked tokens, forward only.
    pub fn mean_ce(&self, tokens: &[u32], segment_ids: &[u16], loss_mask: &[bool]) -> Result<f64> {
        let rows = self.logits_where(tokens, segment_ids, |t| loss_mask[t])?;
        if rows.is_empty() {
            return Err(NpdError::Input("no masked positions".into()));
        }
        let targets = tokens.iter().zip(loss_mask).filter(|(_, &m)| m).map(|(&t, _)| t);
        let total: f64 = rows
            .rows()
            .zip(targets)
            .map(|(r, t)| log_sum_exp(r) - r[t as usize])
            .sum();
        Ok(total / rows.len() as f64)
    }
}

/// Full forward pass: one logit row per position.
pub fn forward_logits(params: &TinyLmParams, tokens: &[u32], segment_ids: &[u16]) -> Result<LogitRows> {
    Evaluator::new(params).logits_where(tokens, segment_ids, |_| true)
}

/// Backpropagates through every context in `contexts` (flat, `window`
/// tokens each). `head(i, logits, dlogits)` receives the logits of site `i`
/// and must fill `dlogits` with the loss gradient for that site.
pub(crate) fn backprop(
    params: &TinyLmParams,
    contexts: &[u32],
    mut head: impl FnMut(usize, &[f64], &mut [f64]),
) -> Gradient {
    let d = params.dims;
    let (v, w, de, dh, din) = (d.vocab_size, d.window, d.embed_dim, d.hidden_dim, d.input_dim());
    let eval = Evaluator::new(params);
    let w2 = params.tensor(Tensor::W2);
    let mut grad = Gradient::zeros(d);
    let mut dtable = vec![0.0; w * v * dh];
    let mut used = vec![false; w * v];
    let mut h = vec![0.0; dh];
    let mut logits = vec![0.0; v];
    let mut dlogits = vec![0.0; v];
    let mut dpre = vec![0.0; dh];
    let mut db1 = vec![0.0; dh];
    let mut dw2 = vec![0.0; v * dh];
    let mut db2 = vec![0.0; v];

    for (i, ctx) in contexts.chunks_exact(w).enumerate() {
        eval.hidden(ctx, &mut h);
        eval.project_out(&h, &mut logits);
        dlogits.iter_mut().for_each(|x| *x = 0.0);
        head(i, &logits, &mut dlogits);

        dpre.iter_mut().for_each(|x| *x = 0.0);
        for vi in 0..v {
            let g = dlogits[vi];
            if g == 0.0 {
                continue;
            }
            db2[vi] += g;
            let wrow = &w2[vi * dh..(vi + 1) * dh];
            let grow = &mut dw2[vi * dh..(vi + 1) * dh];
            for k in 0..dh {
                grow[k] += g * h[k];
                dpre[k] += g * wrow[k];
            }
        }
        for k in 0..dh {
            dpre[k] *= 1.0 - h[k] * h[k];
            db1[k] += dpre[k];
        }
        for (s, &tok) in ctx.iter().enumerate() {
            let idx = s * v + tok as usize;
            used[idx] = true;
            for (a, b) in dtable[idx * dh..(idx + 1) * dh].iter_mut().zip(&dpre) {
                *a += b;
            }
        }
    }

    grad.tensor_mut(Tensor::B1).copy_from_slice(&db1);
    grad.tensor_mut(Tensor::W2).copy_from_slice(&dw2);
    grad.tensor_mut(Tensor::B2).copy_from_slice(&db2);

    let emb = params.tensor(Tensor::Embed);
    let w1 = params.tensor(Tensor::W1);
    let mut dw1 = vec![0.0; dh * din];
    let mut demb = vec![0.0; v * de];
    for s in 0..w {
        for tok in 0..v {
            let idx = s * v + tok;
            if !used[idx] {
                continue;
            }
            let dt = &dtable[idx * dh..(idx + 1) * dh];
            let e = &emb[tok * de..(tok + 1) * de];
            let de_row = &mut demb[tok * de..(tok + 1) * de];
            for k in 0..dh {
                let g = dt[k];
                let off = k * din + s * de;
                let w1_row = &w1[off..off + de];
                let dw1_row = &mut dw1[off..off + de];
                for j in 0..de {
                    dw1_row[j] += g * e[j];
                    de_row[j] += g * w1_row[j];
                }
            }
        }
    }
    grad.tensor_mut(Tensor::W1).copy_from_slice(&dw1);
    grad.tensor_mut(Tensor::Embed).copy_from_slice(&demb);
    grad
}

/// Gathers contexts and targets of every masked position across `seqs`.
pub(crate) fn masked_sites(dims: ModelDims, seqs: &[SeqView<'_>]) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut ctx = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        validate_sequence(dims.vocab_size, s.tokens, s.segment_ids)?;
        if s.loss_mask.len() != s.tokens.len() {
            return Err(NpdError::Input("loss mask length mismatch".into()));
        }
        push_contexts(dims.window, s.tokens, s.segment_ids, |t| s.loss_mask[t], &mut ctx);
        targets.extend(s.tokens.iter().zip(s.loss_mask).filter(|(_, &m)| m).map(|(&t, _)| t));
    }
    Ok((ctx, targets))
}

/// Mean CE over all masked positions of a batch together with its gradient.
pub fn ce_loss_and_grad_batch(params: &TinyLmParams, seqs: &[SeqView<'_>]) -> Result<(f64, Gradient)> {
    let (ctx, targets) = masked_sites(params.dims, seqs)?;
    if targets.is_empty() {
        return Err(NpdError::Input("no masked positions".into()));
    }
    let scale = 1.0 / targets.len() as f64;
    let mut total = 0.0;
    let mut probs = vec![0.0; params.dims.vocab_size];
    let grad = backprop(params, &ctx, |i, logits, dlogits| {
        let target = targets[i] as usize;
        let lse = softmax_into(logits, &mut probs);
        total += lse - logits[target];
        for (d, p) in dlogits.iter_mut().zip(&probs) {
            *d = p * scale;
        }
        dlogits[target] -= scale;
    });
    Ok((total / targets.len() as f64, grad))
}

pub fn ce_loss_and_grad(
    params: &TinyLmParams,
    tokens: &[u32],
    segment_ids: &[u16],
    loss_mask: &[bool],
) -> Result<(f64, Gradient)> {
    ce_loss_and_grad_batch(
        params,
        &[SeqView {
            tokens,
            segment_ids,
            loss_mask,
        }],
    )
}
