//! Incremental auto-regressive decoding.
//!
//! FLASH layers keep a constant-size cache: the running aggregate of folded
//! chunk summaries plus key/value buffers for the chunk being filled. The
//! quadratic GAU keeps its full key/value history.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{gated_inputs, gated_output, Aggregation, AttentionMode, Flash, Gau, Kernel};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Block, Model, ModelKind};
use crate::params::Ctx;
use crate::tensor::Tensor;

/// Per-layer state of a FLASH block.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkCache {
    /// `[s, e]` combination of the folded chunk summaries.
    pub aggregate: Tensor,
    /// Number of chunks folded into `aggregate`.
    pub folded: usize,
    /// `[C, s]` quadratic keys of the current chunk.
    pub quad_k: Tensor,
    /// `[C, s]` linear keys of the current chunk.
    pub lin_k: Tensor,
    /// `[C, e]` values of the current chunk.
    pub values: Tensor,
    /// Rows of the current chunk filled so far.
    pub filled: usize,
}

impl ChunkCache {
    fn new(s: usize, e: usize, chunk: usize) -> Self {
        Self {
            aggregate: Tensor::zeros([s, e]),
            folded: 0,
            quad_k: Tensor::zeros([chunk, s]),
            lin_k: Tensor::zeros([chunk, s]),
            values: Tensor::zeros([chunk, e]),
            filled: 0,
        }
    }

    /// Folds the full current chunk into the aggregate and clears the buffers.
    fn fold(&mut self, agg: Aggregation) {
        let (s, e) = (self.aggregate.shape()[0], self.aggregate.shape()[1]);
        let chunk = self.values.shape()[0];
        let summary = chunk_summary(&self.lin_k, &self.values, s, e, chunk, agg);
        let acc = self.aggregate.data_mut();
        match agg {
            Aggregation::Mean => {
                let w = 1.0 / (self.folded + 1) as f64;
                acc.iter_mut().zip(&summary).for_each(|(a, s)| *a += (s - *a) * w);
            }
            Aggregation::Sum => acc.iter_mut().zip(&summary).for_each(|(a, s)| *a += s),
        }
        self.folded += 1;
        self.filled = 0;
    }

    fn footprint(&self) -> usize {
        self.aggregate.numel() + self.quad_k.numel() + self.lin_k.numel() + self.values.numel()
    }
}

/// `K^T V` over the chunk, divided by `C` under mean aggregation.
fn chunk_summary(k: &Tensor, v: &Tensor, s: usize, e: usize, chunk: usize, agg: Aggregation) -> Vec<f64> {
    let scale = match agg {
        Aggregation::Mean => 1.0 / chunk as f64,
        Aggregation::Sum => 1.0,
    };
    let mut out = vec![0.0; s * e];
    for (kr, vr) in k.data().chunks(s).zip(v.data().chunks(e)) {
        for (a, &kv) in kr.iter().enumerate() {
            let row = &mut out[a * e..(a + 1) * e];
            row.iter_mut().zip(vr).for_each(|(o, &x)| *o += kv * x);
        }
    }
    out.iter_mut().for_each(|x| *x *= scale);
    out
}

/// Per-layer state of a quadratic GAU: every key and value seen so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FullCache {
    /// Row-major `[len, s]`.
    pub keys: Vec<f64>,
    /// Row-major `[len, e]`.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerCache {
    Chunked(ChunkCache),
    Full(FullCache),
}

/// Decoding state of one session.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeCache {
    pub layers: Vec<LayerCache>,
    /// Tokens consumed so far.
    pub position: usize,
}

impl DecodeCache {
    /// Number of floating-point values held.
    pub fn footprint(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerCache::Chunked(c) => c.footprint(),
                LayerCache::Full(f) => f.keys.len() + f.values.len(),
            })
            .sum()
    }
}

/// Cache size of a FLASH model: `layers * (s e + C (2 s + e))` values.
pub fn chunk_cache_footprint(layers: usize, s: usize, e: usize, chunk: usize) -> usize {
    layers * (s * e + chunk * (2 * s + e))
}

/// Steps a causal GAU-based model one token at a time.
pub struct Decoder<'m> {
    model: &'m Model,
    tape: Tape,
    vars: Vec<Var>,
    /// Per-layer relative bias matrices.
    biases: Vec<Tensor>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        let cfg = &model.cfg;
        if !cfg.causal {
            return Err(Error::Config("decoding needs a causal model".into()));
        }
        if !matches!(cfg.kind, ModelKind::Flash | ModelKind::FlashQuad) {
            return Err(Error::Config(format!("no incremental decoder for kind {}", cfg.kind)));
        }
        let tape = Tape::inference();
        let vars = model.store.bind(&tape);
        let cx = Ctx::from_vars(&tape, vars.clone());
        let biases = model
            .blocks
            .iter()
            .map(|b| match b {
                Block::Flash(f) => Ok(f.bias.forward(&cx)?.value().clone()),
                Block::Gau(g) => Ok(g.bias.forward(&cx)?.value().clone()),
                _ => Err(Error::Invalid("unexpected block in GAU model".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        drop(cx);
        Ok(Self {
            model,
            tape,
            vars,
            biases,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Longest sequence the decoder accepts.
    pub fn max_len(&self) -> usize {
        self.model.cfg.context
    }

    /// Zeroed aggregates, empty buffers, position 0.
    pub fn init_cache(&self) -> DecodeCache {
        let cfg = &self.model.cfg;
        let layers = self
            .model
            .blocks
            .iter()
            .map(|b| match b {
                Block::Flash(_) => LayerCache::Chunked(ChunkCache::new(cfg.s, cfg.e, cfg.chunk)),
                _ => LayerCache::Full(FullCache::default()),
            })
            .collect();
        DecodeCache { layers, position: 0 }
    }

    /// Consumes `token` and returns next-token logits `[vocab]`.
    pub fn step(&self, cache: &mut DecodeCache, token: u32) -> Result<Tensor> {
        let model = self.model;
        let p = cache.position;
        if p >= self.max_len() {
            return Err(Error::Invalid(format!("decode position {p} reached the maximum length {}", self.max_len())));
        }
        if token as usize >= model.cfg.vocab {
            return Err(Error::Invalid(format!("token {token} outside vocabulary {}", model.cfg.vocab)));
        }
        let t = &self.tape;
        let cx = Ctx::from_vars(t, self.vars.clone());
        let d = model.cfg.d;
        let row = t.gather_rows(cx.p(model.embed), &[token as usize])?;
        let mut x = t.add(&t.reshape(&row, &[1, 1, d])?, &model.pos.forward(&cx, 1, p)?)?;
        for ((block, layer), bias) in model.blocks.iter().zip(&mut cache.layers).zip(&self.biases) {
            x = match (block, layer) {
                (Block::Flash(f), LayerCache::Chunked(c)) => flash_step(&cx, f, bias, c, &x, p)?,
                (Block::Gau(g), LayerCache::Full(c)) => quad_step(&cx, g, bias, c, &x, p)?,
                _ => return Err(Error::Invalid("cache does not match the model".into())),
            };
        }
        cache.position += 1;
        let logits = model.project(&cx, &x)?;
        logits.value().reshape([model.cfg.vocab])
    }

    /// Feeds `prompt`, then appends `max_new` greedy tokens.
    pub fn generate(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let first = *prompt
            .first()
            .ok_or_else(|| Error::Invalid("empty prompt".into()))?;
        let mut cache = self.init_cache();
        let mut logits = self.step(&mut cache, first)?;
        for &tok in &prompt[1..] {
            logits = self.step(&mut cache, tok)?;
        }
        let mut out = Vec::with_capacity(max_new);
        for i in 0..max_new {
            let next = greedy(&logits);
            out.push(next);
            if i + 1 < max_new {
                logits = self.step(&mut cache, next)?;
            }
        }
        Ok(out)
    }
}

/// Index of the largest logit (first on ties).
pub fn greedy(logits: &Tensor) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best as u32
}

/// Attention weights of one query against `keys` (`[n, s]` rows) with the
/// bias row of its position.
fn kernel_row(q: &[f64], keys: &[f64], bias: &[f64], span: usize, kernel: Kernel) -> Vec<f64> {
    let s = q.len();
    let dots = keys.chunks(s).map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>());
    match kernel {
        Kernel::Relu2 => {
            let scale = 1.0 / span as f64;
            dots.zip(bias)
                .map(|(dot, b)| {
                    let r = (dot * scale + b).max(0.0);
                    r * r
                })
                .collect()
        }
        Kernel::Softmax => {
            let scale = 1.0 / libm::sqrt(s as f64);
            let logits: Vec<f64> = dots.zip(bias).map(|(dot, b)| dot * scale + b).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
            let total: f64 = exp.iter().sum();
            exp.into_iter().map(|x| x / total).collect()
        }
    }
}

/// `sum_j w_j v_j` over `[n, e]` value rows.
fn weighted_values(w: &[f64], values: &[f64], e: usize) -> Vec<f64> {
    let mut out = vec![0.0; e];
    for (&wj, vj) in w.iter().zip(values.chunks(e)) {
        out.iter_mut().zip(vj).for_each(|(o, &v)| *o += wj * v);
    }
    out
}

fn flash_step(cx: &Ctx, f: &Flash, bias: &Tensor, c: &mut ChunkCache, x: &Var, pos: usize) -> Result<Var> {
    let t = cx.tape;
    let (s, e, chunk) = (f.dims.s, f.dims.e, f.chunk);
    let (u, v, z) = gated_inputs(cx, &f.norm, &f.proj, x, f.dims)?;
    let heads = t.rope(&f.heads.forward(cx, &z)?, &[1], pos)?;
    let h = heads.value().data();
    let (quad_q, quad_k, lin_q, lin_k) = (&h[..s], &h[s..2 * s], &h[2 * s..3 * s], &h[3 * s..4 * s]);
    let i = c.filled;
    c.quad_k.data_mut()[i * s..(i + 1) * s].copy_from_slice(quad_k);
    c.lin_k.data_mut()[i * s..(i + 1) * s].copy_from_slice(lin_k);
    c.values.data_mut()[i * e..(i + 1) * e].copy_from_slice(v.value().data());
    c.filled += 1;

    let n = i + 1;
    let w = kernel_row(quad_q, &c.quad_k.data()[..n * s], &bias.data()[i * chunk..i * chunk + n], chunk, f.kernel);
    let mut mixed = weighted_values(&w, &c.values.data()[..n * e], e);
    let agg = c.aggregate.data();
    for (k, &qk) in lin_q.iter().enumerate() {
        let row = &agg[k * e..(k + 1) * e];
        mixed.iter_mut().zip(row).for_each(|(m, &a)| *m += qk * a);
    }
    if c.filled == chunk {
        c.fold(f.agg);
    }
    let mixed = t.constant(Tensor::new([1, 1, e], mixed)?);
    gated_output(cx, &f.out, x, &u, &mixed)
}

fn quad_step(cx: &Ctx, g: &Gau, bias: &Tensor, c: &mut FullCache, x: &Var, pos: usize) -> Result<Var> {
    let t = cx.tape;
    let (s, e, len) = (g.dims.s, g.dims.e, g.bias.len());
    let (u, v, z) = gated_inputs(cx, &g.norm, &g.proj, x, g.dims)?;
    let mixed = match g.mode {
        AttentionMode::Identity => v,
        AttentionMode::Learned => {
            let heads = t.rope(&g.heads.forward(cx, &z)?, &[1], pos)?;
            let h = heads.value().data();
            c.keys.extend_from_slice(&h[s..2 * s]);
            c.values.extend_from_slice(v.value().data());
            let n = pos + 1;
            let w = kernel_row(&h[..s], &c.keys, &bias.data()[pos * len..pos * len + n], len, g.kernel);
            t.constant(Tensor::new([1, 1, e], weighted_values(&w, &c.values, e))?)
        }
    };
    gated_output(cx, &g.out, x, &u, &mixed)
}

#[cfg(test)]
mod tests;
