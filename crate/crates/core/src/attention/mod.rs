//! Gated attention units, mixed chunk attention and reference attentions.
//!
//! Shapes: token-level tensors are `[B, T, ·]`; chunked tensors are
//! `[B, G, C, ·]` with `T = G * C`.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Unary, Var};
use crate::error::{dim_err, Error, Result};
use crate::layers::{Dense, Norm, NormKind, RelBias, ScaleOffset};
use crate::params::{Ctx, Init, ParamStore};
use crate::tensor::Tensor;

/// Attention weight function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Kernel {
    /// `relu(qk^T / n + bias)^2`, causally masked by zeroing.
    #[default]
    Relu2,
    /// Softmax of `qk^T / sqrt(s) + bias`.
    Softmax,
}

/// How chunk summaries are combined across chunks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Each summary is `K^T V / C` and visible summaries are averaged.
    #[default]
    Mean,
    /// Plain `K^T V` summed over visible chunks.
    Sum,
}

/// Width parameters of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    /// Model width.
    pub d: usize,
    /// Expanded (gated value) width.
    pub e: usize,
    /// Shared query/key width.
    pub s: usize,
}

/// Leading batch labels for contraction specs.
fn lead(n: usize) -> String {
    (b'a'..b'h').take(n).map(char::from).collect()
}

/// Lower-triangular `[n, n]` ones (diagonal included).
pub fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn([n, n], |i| if i[1] <= i[0] { 1.0 } else { 0.0 })
}

/// Chunk-level visibility weights `[B, G, G]` from per-token segment ids
/// laid out as `[B, G, C]`.
///
/// Chunks `g` and `h` see each other when their id ranges overlap; the causal
/// variant keeps only `h < g`. With [`Aggregation::Mean`] rows are divided by
/// their sum, empty rows staying zero.
pub fn segment_mask(
    ids: &[u32],
    batch: usize,
    chunks: usize,
    chunk: usize,
    causal: bool,
    agg: Aggregation,
) -> Result<Tensor> {
    if ids.len() != batch * chunks * chunk || chunk == 0 {
        return Err(dim_err!(
            "{} segment ids for layout [{batch}, {chunks}, {chunk}]",
            ids.len()
        ));
    }
    let mut out = Tensor::zeros([batch, chunks, chunks]);
    let data = out.data_mut();
    for b in 0..batch {
        let range = |g: usize| {
            let row = &ids[(b * chunks + g) * chunk..(b * chunks + g + 1) * chunk];
            let lo = row.iter().copied().min().unwrap_or(0);
            let hi = row.iter().copied().max().unwrap_or(0);
            (lo, hi)
        };
        let ranges: Vec<(u32, u32)> = (0..chunks).map(range).collect();
        for g in 0..chunks {
            let row = &mut data[(b * chunks + g) * chunks..(b * chunks + g + 1) * chunks];
            for (h, w) in row.iter_mut().enumerate() {
                let overlap = ranges[g].0 <= ranges[h].1 && ranges[g].1 >= ranges[h].0;
                if overlap && (!causal || h < g) {
                    *w = 1.0;
                }
            }
            if agg == Aggregation::Mean {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|w| *w /= total);
                }
            }
        }
    }
    Ok(out)
}

/// `relu(scores * scale + bias)^2` with causally hidden entries set to zero.
///
/// One fused op: only `relu(.)` is retained for the backward pass.
fn relu2_scores(t: &Tape, scores: &Var, bias: Option<&Var>, scale: f64, causal: bool) -> Result<Var> {
    let shape = scores.shape().to_vec();
    let rank = shape.len();
    if rank < 2 {
        return Err(dim_err!("attention scores need rank >= 2, got {shape:?}"));
    }
    let (n, m) = (shape[rank - 2], shape[rank - 1]);
    if let Some(b) = bias {
        if b.shape() != [n, m] {
            return Err(dim_err!("bias {:?} does not match scores [{n}, {m}]", b.shape()));
        }
    }
    let bias_data: Option<Rc<Tensor>> = bias.map(|b| b.rc());
    let mut r = vec![0.0; scores.value().numel()];
    for (src, dst) in scores.value().data().chunks(n * m).zip(r.chunks_mut(n * m)) {
        for i in 0..n {
            let cols = if causal { (i + 1).min(m) } else { m };
            for j in 0..cols {
                let mut pre = src[i * m + j] * scale;
                if let Some(b) = &bias_data {
                    pre += b.data()[i * m + j];
                }
                dst[i * m + j] = pre.max(0.0);
            }
        }
    }
    let value = Tensor::new(shape.clone(), r.iter().map(|x| x * x).collect())?;
    let mut inputs: Vec<&Var> = vec![scores];
    if let Some(b) = bias {
        inputs.push(b);
    }
    if !t.tracks(&inputs) {
        return Ok(t.constant(value));
    }
    let r = Tensor::new(shape.clone(), r)?;
    let has_bias = bias.is_some();
    Ok(t.record(value, &inputs, move |g| {
        let dpre: Vec<f64> = g.data().iter().zip(r.data()).map(|(g, r)| 2.0 * g * r).collect();
        let dscores = Tensor::new(shape.clone(), dpre.iter().map(|x| x * scale).collect())?;
        let mut grads = vec![Some(dscores)];
        if has_bias {
            let mut db = vec![0.0; n * m];
            for blk in dpre.chunks(n * m) {
                db.iter_mut().zip(blk).for_each(|(a, b)| *a += b);
            }
            grads.push(Some(Tensor::new([n, m], db)?));
        }
        Ok(grads)
    }))
}

/// Attention weights `[.., n, m]` for queries `[.., n, s]` and keys `[.., m, s]`.
///
/// `span` is the length scale of the relu² kernel (the attention span).
pub fn quad_kernel(
    t: &Tape,
    q: &Var,
    k: &Var,
    bias: Option<&Var>,
    span: usize,
    causal: bool,
    kind: Kernel,
) -> Result<Var> {
    let rank = q.shape().len();
    if rank < 2 || k.shape().len() != rank {
        return Err(dim_err!("quad_kernel: q {:?} vs k {:?}", q.shape(), k.shape()));
    }
    let l = lead(rank - 2);
    let qk = t.contract(q, k, &format!("{l}ns,{l}ms->{l}nm"))?;
    match kind {
        Kernel::Relu2 => relu2_scores(t, &qk, bias, 1.0 / span as f64, causal),
        Kernel::Softmax => {
            let s = q.shape()[rank - 1] as f64;
            let mut logits = t.scale(&qk, 1.0 / libm::sqrt(s))?;
            if let Some(b) = bias {
                logits = t.add(&logits, b)?;
            }
            t.softmax(&logits, causal)
        }
    }
}

/// Quadratic attention applied independently inside each chunk.
///
/// `q`, `k` are `[B, G, C, s]`, `v` is `[B, G, C, e]` and `bias` is the shared
/// `[C, C]` within-chunk bias.
pub fn local_quadratic_attn(
    t: &Tape,
    q: &Var,
    k: &Var,
    v: &Var,
    bias: Option<&Var>,
    causal: bool,
    kind: Kernel,
) -> Result<Var> {
    let chunk = q.shape()[2];
    let a = quad_kernel(t, q, k, bias, chunk, causal, kind)?;
    t.contract(&a, v, "bgnm,bgme->bgne")
}

/// Per-chunk summaries `K_h^T V_h` (`/ C` under mean aggregation), `[B, G, s, e]`.
pub fn chunk_summaries(t: &Tape, lin_k: &Var, v: &Var, agg: Aggregation) -> Result<Var> {
    let kv = t.contract(lin_k, v, "bgns,bgne->bgse")?;
    match agg {
        Aggregation::Mean => t.scale(&kv, 1.0 / lin_k.shape()[2] as f64),
        Aggregation::Sum => Ok(kv),
    }
}

/// Global linear attention across chunks weighted by a `[B, G, G]` mask.
pub fn global_linear_attn(
    t: &Tape,
    lin_q: &Var,
    lin_k: &Var,
    v: &Var,
    mask: &Tensor,
    agg: Aggregation,
) -> Result<Var> {
    let kv = chunk_summaries(t, lin_k, v, agg)?;
    let (b, g) = (kv.shape()[0], kv.shape()[1]);
    if mask.shape() != [b, g, g] {
        return Err(dim_err!("segment mask {:?} for {b} rows of {g} chunks", mask.shape()));
    }
    let mixed = t.contract(&kv, &t.constant(mask.clone()), "bhse,bgh->bgse")?;
    t.contract(lin_q, &mixed, "bgns,bgse->bgne")
}

/// Output of a scan together with its number of dependent accumulation steps.
pub struct Scan {
    pub out: Var,
    pub steps: usize,
}

/// Causal global linear attention for single-document rows, aggregating with
/// an exclusive prefix sum over chunks.
pub fn global_linear_attn_prefix(
    t: &Tape,
    lin_q: &Var,
    lin_k: &Var,
    v: &Var,
    agg: Aggregation,
) -> Result<Scan> {
    let kv = chunk_summaries(t, lin_k, v, agg)?;
    let g = kv.shape()[1];
    let mut prefix = t.cumsum(&kv, 1, true)?;
    if agg == Aggregation::Mean {
        let w = Tensor::from_fn([g, 1, 1], |i| if i[0] == 0 { 0.0 } else { 1.0 / i[0] as f64 });
        prefix = t.mul(&prefix, &t.constant(w))?;
    }
    Ok(Scan {
        out: t.contract(lin_q, &prefix, "bgns,bgse->bgne")?,
        steps: g,
    })
}

/// Token-level linear attention `[B, T, ·]`.
///
/// Non-causal: `Q (K^T V)`. Causal: `out_t = Q_t M_{t-1}` with
/// `M_t = M_{t-1} + K_t V_t^T`, computed as an exclusive prefix sum over all
/// `T` tokens.
pub fn token_linear_attention(t: &Tape, q: &Var, k: &Var, v: &Var, causal: bool) -> Result<Scan> {
    if causal {
        let outer = t.contract(k, v, "btk,bte->btke")?;
        let m = t.cumsum(&outer, 1, true)?;
        Ok(Scan {
            out: t.contract(q, &m, "btk,btke->bte")?,
            steps: q.shape()[1],
        })
    } else {
        let kv = t.contract(k, v, "btk,bte->bke")?;
        Ok(Scan {
            out: t.contract(q, &kv, "btk,bke->bte")?,
            steps: 0,
        })
    }
}

/// Input norm, fused SiLU projection and the `[e, e, s]` split into `(u, v, z)`.
pub(crate) fn gated_inputs(cx: &Ctx, norm: &Norm, proj: &Dense, x: &Var, dims: BlockDims) -> Result<(Var, Var, Var)> {
    let t = cx.tape;
    let h = norm.forward(cx, x)?;
    let uv = t.map(&proj.forward(cx, &h)?, Unary::Silu)?;
    let axis = uv.shape().len() - 1;
    let mut parts = t.split(&uv, axis, &[dims.e, dims.e, dims.s])?.into_iter();
    match (parts.next(), parts.next(), parts.next()) {
        (Some(u), Some(v), Some(z)) => Ok((u, v, z)),
        _ => Err(Error::Invalid("projection split".into())),
    }
}

/// Gating, output projection and residual: `x + W_o (u * mixed)`.
pub(crate) fn gated_output(cx: &Ctx, out: &Dense, x: &Var, u: &Var, mixed: &Var) -> Result<Var> {
    let t = cx.tape;
    let y = out.forward(cx, &t.mul(u, mixed)?)?;
    t.add(x, &y)
}

/// What the GAU uses as its attention matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Learned,
    /// `A = I`, reducing the unit to a GLU (test hook).
    Identity,
}

/// Quadratic gated attention unit over a whole sequence of fixed length.
#[derive(Clone, Debug)]
pub struct Gau {
    pub norm: Norm,
    pub proj: Dense,
    pub heads: ScaleOffset,
    pub bias: RelBias,
    pub out: Dense,
    pub dims: BlockDims,
    pub kernel: Kernel,
    pub mode: AttentionMode,
}

impl Gau {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        dims: BlockDims,
        len: usize,
        norm: NormKind,
        kernel: Kernel,
        mode: AttentionMode,
    ) -> Result<Self> {
        let BlockDims { d, e, s } = dims;
        Ok(Self {
            norm: Norm::new(store, norm, &format!("{name}.norm"), d),
            proj: Dense::new(store, init, &format!("{name}.proj"), d, 2 * e + s),
            heads: ScaleOffset::new(store, init, &format!("{name}.scale_offset"), 2, s),
            bias: RelBias::new(store, init, &format!("{name}.rel_bias"), len)?,
            out: Dense::new(store, init, &format!("{name}.out"), e, d),
            dims,
            kernel,
            mode,
        })
    }

    /// `[B, T, d] -> [B, T, d]`.
    pub fn forward(&self, cx: &Ctx, x: &Var, causal: bool) -> Result<Var> {
        let t = cx.tape;
        let len = x.shape()[1];
        if x.shape().len() != 3 || len != self.bias.len() {
            return Err(dim_err!(
                "GAU built for length {} got input {:?}",
                self.bias.len(),
                x.shape()
            ));
        }
        let (u, v, z) = gated_inputs(cx, &self.norm, &self.proj, x, self.dims)?;
        let mixed = match self.mode {
            AttentionMode::Identity => v,
            AttentionMode::Learned => {
                let base = t.rope(&self.heads.forward(cx, &z)?, &[1], 0)?;
                let qk = self.heads.unstack(cx, &base)?;
                let bias = self.bias.forward(cx)?;
                let a = quad_kernel(t, &qk[0], &qk[1], Some(&bias), len, causal, self.kernel)?;
                t.contract(&a, &v, "bnm,bme->bne")?
            }
        };
        gated_output(cx, &self.out, x, &u, &mixed)
    }
}

/// Gated linear unit `x + W_o (silu(U) * silu(V))` with a pre-norm.
#[derive(Clone, Debug)]
pub struct Glu {
    pub norm: Norm,
    pub proj: Dense,
    pub out: Dense,
    pub d: usize,
    pub e: usize,
}

impl Glu {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, e: usize, norm: NormKind) -> Self {
        Self {
            norm: Norm::new(store, norm, &format!("{name}.norm"), d),
            proj: Dense::new(store, init, &format!("{name}.proj"), d, 2 * e),
            out: Dense::new(store, init, &format!("{name}.out"), e, d),
            d,
            e,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> Result<Var> {
        let t = cx.tape;
        let h = self.norm.forward(cx, x)?;
        let uv = t.map(&self.proj.forward(cx, &h)?, Unary::Silu)?;
        let axis = uv.shape().len() - 1;
        let parts = t.split(&uv, axis, &[self.e, self.e])?;
        gated_output(cx, &self.out, x, &parts[0], &parts[1])
    }
}

/// GAU with mixed chunk attention: exact quadratic attention inside chunks
/// plus linear attention across chunks.
#[derive(Clone, Debug)]
pub struct Flash {
    pub norm: Norm,
    pub proj: Dense,
    /// Four heads: quadratic query/key, linear query/key.
    pub heads: ScaleOffset,
    /// Within-chunk `[C, C]` bias.
    pub bias: RelBias,
    pub out: Dense,
    pub dims: BlockDims,
    pub chunk: usize,
    pub kernel: Kernel,
    pub agg: Aggregation,
}

impl Flash {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        dims: BlockDims,
        chunk: usize,
        norm: NormKind,
        kernel: Kernel,
        agg: Aggregation,
    ) -> Result<Self> {
        let BlockDims { d, e, s } = dims;
        Ok(Self {
            norm: Norm::new(store, norm, &format!("{name}.norm"), d),
            proj: Dense::new(store, init, &format!("{name}.proj"), d, 2 * e + s),
            heads: ScaleOffset::new(store, init, &format!("{name}.scale_offset"), 4, s),
            bias: RelBias::new(store, init, &format!("{name}.rel_bias"), chunk)?,
            out: Dense::new(store, init, &format!("{name}.out"), e, d),
            dims,
            chunk,
            kernel,
            agg,
        })
    }

    /// `[B, G, C, d] -> [B, G, C, d]` given the `[B, G, G]` segment mask.
    pub fn forward(&self, cx: &Ctx, x: &Var, mask: &Tensor, causal: bool) -> Result<Var> {
        self.parts(cx, x, mask, causal, None)
    }

    /// Like [`Flash::forward`] with the global part computed by the causal
    /// prefix scan instead of a mask (single-document rows only).
    pub fn forward_prefix(&self, cx: &Ctx, x: &Var) -> Result<Scan> {
        let mut steps = 0;
        let out = self.parts(cx, x, &Tensor::zeros([0]), true, Some(&mut steps))?;
        Ok(Scan { out, steps })
    }

    /// Forward with the global linear contribution dropped.
    pub fn forward_local_only(&self, cx: &Ctx, x: &Var, causal: bool) -> Result<Var> {
        let t = cx.tape;
        let (u, v, quad_q, quad_k, _, _) = self.heads_of(cx, x)?;
        let bias = self.bias.forward(cx)?;
        let quad = local_quadratic_attn(t, &quad_q, &quad_k, &v, Some(&bias), causal, self.kernel)?;
        gated_output(cx, &self.out, x, &u, &quad)
    }

    #[allow(clippy::type_complexity)]
    fn heads_of(&self, cx: &Ctx, x: &Var) -> Result<(Var, Var, Var, Var, Var, Var)> {
        let shape = x.shape();
        if shape.len() != 4 || shape[2] != self.chunk || shape[3] != self.dims.d {
            return Err(dim_err!(
                "FLASH expects [B, G, {}, {}], got {shape:?}",
                self.chunk,
                self.dims.d
            ));
        }
        let t = cx.tape;
        let (u, v, z) = gated_inputs(cx, &self.norm, &self.proj, x, self.dims)?;
        let base = t.rope(&self.heads.forward(cx, &z)?, &[1, 2], 0)?;
        let mut h = self.heads.unstack(cx, &base)?.into_iter();
        match (h.next(), h.next(), h.next(), h.next()) {
            (Some(a), Some(b), Some(c), Some(d)) => Ok((u, v, a, b, c, d)),
            _ => Err(Error::Invalid("expected four heads".into())),
        }
    }

    fn parts(
        &self,
        cx: &Ctx,
        x: &Var,
        mask: &Tensor,
        causal: bool,
        prefix_steps: Option<&mut usize>,
    ) -> Result<Var> {
        let t = cx.tape;
        let (u, v, quad_q, quad_k, lin_q, lin_k) = self.heads_of(cx, x)?;
        let bias = self.bias.forward(cx)?;
        let quad = local_quadratic_attn(t, &quad_q, &quad_k, &v, Some(&bias), causal, self.kernel)?;
        let lin = match prefix_steps {
            Some(steps) => {
                let scan = global_linear_attn_prefix(t, &lin_q, &lin_k, &v, self.agg)?;
                *steps = scan.steps;
                scan.out
            }
            None => global_linear_attn(t, &lin_q, &lin_k, &v, mask, self.agg)?,
        };
        let mixed = t.add(&quad, &lin)?;
        gated_output(cx, &self.out, x, &u, &mixed)
    }
}

/// GAU whose attention is causal token-level linear attention (an
/// exclusive prefix over all `T` tokens), normalized by the visible count.
#[derive(Clone, Debug)]
pub struct LinearGau {
    pub norm: Norm,
    pub proj: Dense,
    pub heads: ScaleOffset,
    pub out: Dense,
    pub dims: BlockDims,
}

impl LinearGau {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dims: BlockDims, norm: NormKind) -> Self {
        let BlockDims { d, e, s } = dims;
        Self {
            norm: Norm::new(store, norm, &format!("{name}.norm"), d),
            proj: Dense::new(store, init, &format!("{name}.proj"), d, 2 * e + s),
            heads: ScaleOffset::new(store, init, &format!("{name}.scale_offset"), 2, s),
            out: Dense::new(store, init, &format!("{name}.out"), e, d),
            dims,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var, causal: bool) -> Result<Var> {
        let t = cx.tape;
        let len = x.shape()[1];
        let (u, v, z) = gated_inputs(cx, &self.norm, &self.proj, x, self.dims)?;
        let base = t.rope(&self.heads.forward(cx, &z)?, &[1], 0)?;
        let qk = self.heads.unstack(cx, &base)?;
        let scan = token_linear_attention(t, &qk[0], &qk[1], &v, causal)?;
        let w = if causal {
            Tensor::from_fn([len, 1], |i| if i[0] == 0 { 0.0 } else { 1.0 / i[0] as f64 })
        } else {
            Tensor::full([len, 1], 1.0 / len as f64)
        };
        let mixed = t.mul(&scan.out, &t.constant(w))?;
        gated_output(cx, &self.out, x, &u, &mixed)
    }
}

/// Multi-head softmax self-attention with RoPE on queries and keys.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub norm: Norm,
    pub qkv: Dense,
    pub out: Dense,
    pub d: usize,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        d: usize,
        heads: usize,
        norm: NormKind,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) || !(d / heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "width {d} must split into {heads} heads of even size"
            )));
        }
        Ok(Self {
            norm: Norm::new(store, norm, &format!("{name}.norm"), d),
            qkv: Dense::new(store, init, &format!("{name}.qkv"), d, 3 * d),
            out: Dense::new(store, init, &format!("{name}.out"), d, d),
            d,
            heads,
        })
    }

    /// Parameters of the projections alone: `4 d^2 + 4 d`.
    pub fn attention_param_count(d: usize) -> usize {
        Dense::param_count(d, 3 * d) + Dense::param_count(d, d)
    }

    /// Attention probabilities `[B, H, T, T]` and the block output.
    pub fn forward_with_weights(&self, cx: &Ctx, x: &Var, causal: bool) -> Result<(Var, Var)> {
        let t = cx.tape;
        let (b, len) = (x.shape()[0], x.shape()[1]);
        let hd = self.d / self.heads;
        let h = self.norm.forward(cx, x)?;
        let qkv = self.qkv.forward(cx, &h)?;
        let parts = t.split(&qkv, 2, &[self.d, self.d, self.d])?;
        let split = |v: &Var| t.reshape(v, &[b, len, self.heads, hd]);
        let q = t.rope(&split(&parts[0])?, &[1], 0)?;
        let k = t.rope(&split(&parts[1])?, &[1], 0)?;
        let v = split(&parts[2])?;
        let logits = t.contract(&q, &k, "bnhd,bmhd->bhnm")?;
        let logits = t.scale(&logits, 1.0 / libm::sqrt(hd as f64))?;
        let probs = t.softmax(&logits, causal)?;
        let mixed = t.contract(&probs, &v, "bhnm,bmhd->bnhd")?;
        let mixed = t.reshape(&mixed, &[b, len, self.d])?;
        let y = self.out.forward(cx, &mixed)?;
        Ok((probs, t.add(x, &y)?))
    }

    pub fn forward(&self, cx: &Ctx, x: &Var, causal: bool) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x, causal)?.1)
    }
}

/// Pre-norm two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: Norm,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, hidden: usize, norm: NormKind) -> Self {
        Self {
            norm: Norm::new(store, norm, &format!("{name}.norm"), d),
            fc1: Dense::new(store, init, &format!("{name}.fc1"), d, hidden),
            fc2: Dense::new(store, init, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> Result<Var> {
        let t = cx.tape;
        let h = self.norm.forward(cx, x)?;
        let h = t.map(&self.fc1.forward(cx, &h)?, Unary::Gelu)?;
        t.add(x, &self.fc2.forward(cx, &h)?)
    }
}
