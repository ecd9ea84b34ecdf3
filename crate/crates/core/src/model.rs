//! Language models assembled from the attention blocks.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::attention::{
    segment_mask, Aggregation, AttentionMode, BlockDims, Flash, Gau, Glu, Kernel, LinearGau, Mhsa, Mlp,
};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{Dense, Norm, NormKind, RelBias, ScaleOffset, ScaledSin};
use crate::params::{Ctx, Init, ParamId, ParamStore, INIT_STD};
use crate::tensor::Tensor;

/// Number of byte values.
pub const BYTE_VOCAB: usize = 256;

/// Reserved input id for masked positions in masked language modeling.
pub const MASK_ID: u32 = 256;

/// Layer stack type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Quadratic GAU layers over the whole context.
    FlashQuad,
    /// GAU layers with mixed chunk attention.
    Flash,
    /// RoPE softmax attention + GLU blocks.
    TransformerPp,
    /// RoPE softmax attention + GELU MLP blocks.
    MhsaMlp,
    /// GAU layers with causal token-level linear attention.
    LinearToken,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::FlashQuad,
        ModelKind::Flash,
        ModelKind::TransformerPp,
        ModelKind::MhsaMlp,
        ModelKind::LinearToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::FlashQuad => "flash_quad",
            ModelKind::Flash => "flash",
            ModelKind::TransformerPp => "transformer_pp",
            ModelKind::MhsaMlp => "mhsa_mlp",
            ModelKind::LinearToken => "linear_token",
        }
    }

    /// Whether `layers` counts attention + feed-forward sublayers (two per block).
    pub fn is_transformer(self) -> bool {
        matches!(self, ModelKind::TransformerPp | ModelKind::MhsaMlp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind `{s}`")))
    }
}

/// Every hyperparameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Model width.
    pub d: usize,
    /// Expanded width (`2d` by default).
    pub e: usize,
    /// Shared query/key width.
    pub s: usize,
    /// GAU layers, or sublayers for the transformer kinds (two per block).
    pub layers: usize,
    /// Chunk size for mixed chunk attention.
    pub chunk: usize,
    /// Context length.
    pub context: usize,
    pub kernel: Kernel,
    pub aggregation: Aggregation,
    pub causal: bool,
    pub norm: NormKind,
    pub vocab: usize,
    /// Attention heads for the transformer kinds.
    pub heads: usize,
    /// Output projection shares the embedding table.
    pub tied: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(ModelKind::Flash, 128, 4, 256, 64)
    }
}

impl ModelConfig {
    /// Causal byte-level config with `e = 2d`, `s = min(128, d)`.
    pub fn new(kind: ModelKind, d: usize, layers: usize, context: usize, chunk: usize) -> Self {
        Self {
            kind,
            d,
            e: 2 * d,
            s: d.min(128),
            layers,
            chunk,
            context,
            kernel: Kernel::Relu2,
            aggregation: Aggregation::Mean,
            causal: true,
            norm: NormKind::Layer,
            vocab: BYTE_VOCAB,
            heads: (d / 64).max(1),
            tied: true,
        }
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            d: self.d,
            e: self.e,
            s: self.s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return fail(format!("model width must be even and positive, got {}", self.d));
        }
        if self.e == 0 || self.s == 0 || !self.s.is_multiple_of(2) {
            return fail(format!("need e >= 1 and even s >= 2, got e={} s={}", self.e, self.s));
        }
        if self.layers == 0 || self.context == 0 || self.vocab == 0 {
            return fail("layers, context and vocab must be positive".into());
        }
        if self.kind == ModelKind::Flash && (self.chunk == 0 || !self.context.is_multiple_of(self.chunk)) {
            return fail(format!(
                "chunk size {} must divide context length {}",
                self.chunk, self.context
            ));
        }
        if self.kind.is_transformer() {
            if !self.layers.is_multiple_of(2) {
                return fail(format!("transformer kinds need an even sublayer count, got {}", self.layers));
            }
            if self.heads == 0 || !self.d.is_multiple_of(self.heads) || !(self.d / self.heads).is_multiple_of(2) {
                return fail(format!("width {} does not split into {} even heads", self.d, self.heads));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, e, s, v) = (self.d, self.e, self.s, self.vocab);
        let norm = Norm::param_count(self.norm, d);
        let gau_core = norm + Dense::param_count(d, 2 * e + s) + Dense::param_count(e, d);
        let blocks = match self.kind {
            ModelKind::FlashQuad => {
                self.layers * (gau_core + ScaleOffset::param_count(2, s) + RelBias::param_count(self.context))
            }
            ModelKind::Flash => {
                self.layers * (gau_core + ScaleOffset::param_count(4, s) + RelBias::param_count(self.chunk))
            }
            ModelKind::LinearToken => self.layers * (gau_core + ScaleOffset::param_count(2, s)),
            ModelKind::TransformerPp | ModelKind::MhsaMlp => {
                let ffn = if self.kind == ModelKind::TransformerPp {
                    Dense::param_count(d, 2 * e) + Dense::param_count(e, d)
                } else {
                    Dense::param_count(d, 4 * d) + Dense::param_count(4 * d, d)
                };
                (self.layers / 2) * (2 * norm + Mhsa::attention_param_count(d) + ffn)
            }
        };
        let head = if self.tied { 0 } else { d * v };
        v * d + 1 + blocks + norm + head
    }
}

/// One residual block of the stack.
#[derive(Clone, Debug)]
pub enum Block {
    Gau(Gau),
    Flash(Flash),
    Linear(LinearGau),
    Mhsa(Mhsa),
    Glu(Glu),
    Mlp(Mlp),
}

/// Embedding, block stack, final norm and output projection.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: ParamId,
    pub pos: ScaledSin,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    /// `[d, vocab]` output weights when untied.
    pub head: Option<ParamId>,
}

impl Model {
    /// Deterministically initialized model.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_mode(cfg, seed, AttentionMode::Learned)
    }

    /// Like [`Model::new`] with the GAU attention mode chosen explicitly.
    pub fn with_mode(cfg: ModelConfig, seed: u64, mode: AttentionMode) -> Result<Self> {
        cfg.validate()?;
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let (d, dims) = (cfg.d, cfg.dims());
        let embed = store.add_normal("embed", &init, [cfg.vocab, d], INIT_STD);
        let pos = ScaledSin::new(&mut store, "pos", d)?;
        let mut blocks = Vec::new();
        let n_blocks = if cfg.kind.is_transformer() { cfg.layers / 2 } else { cfg.layers };
        for i in 0..n_blocks {
            let name = format!("layers.{i}");
            match cfg.kind {
                ModelKind::FlashQuad => blocks.push(Block::Gau(Gau::new(
                    &mut store,
                    &init,
                    &name,
                    dims,
                    cfg.context,
                    cfg.norm,
                    cfg.kernel,
                    mode,
                )?)),
                ModelKind::Flash => blocks.push(Block::Flash(Flash::new(
                    &mut store,
                    &init,
                    &name,
                    dims,
                    cfg.chunk,
                    cfg.norm,
                    cfg.kernel,
                    cfg.aggregation,
                )?)),
                ModelKind::LinearToken => {
                    blocks.push(Block::Linear(LinearGau::new(&mut store, &init, &name, dims, cfg.norm)))
                }
                ModelKind::TransformerPp | ModelKind::MhsaMlp => {
                    let attn = Mhsa::new(&mut store, &init, &format!("{name}.attn"), d, cfg.heads, cfg.norm)?;
                    blocks.push(Block::Mhsa(attn));
                    let ffn_name = format!("{name}.ffn");
                    blocks.push(if cfg.kind == ModelKind::TransformerPp {
                        Block::Glu(Glu::new(&mut store, &init, &ffn_name, d, cfg.e, cfg.norm))
                    } else {
                        Block::Mlp(Mlp::new(&mut store, &init, &ffn_name, d, 4 * d, cfg.norm))
                    });
                }
            }
        }
        let final_norm = Norm::new(&mut store, cfg.norm, "final_norm", d);
        let head = (!cfg.tied).then(|| store.add_normal("head", &init, [d, cfg.vocab], INIT_STD));
        Ok(Self {
            cfg,
            store,
            embed,
            pos,
            blocks,
            final_norm,
            head,
        })
    }

    /// Token embeddings plus positions, `[B, T, d]`.
    pub fn embed(&self, cx: &Ctx, tokens: &[u32], batch: usize) -> Result<Var> {
        let t = cx.tape;
        let len = tokens.len() / batch.max(1);
        if batch == 0 || len * batch != tokens.len() || len == 0 {
            return Err(Error::Dimension(format!("{} tokens for batch {batch}", tokens.len())));
        }
        let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let rows = t.gather_rows(cx.p(self.embed), &ids)?;
        let x = t.reshape(&rows, &[batch, len, self.cfg.d])?;
        t.add(&x, &self.pos.forward(cx, len, 0)?)
    }

    /// Final hidden states `[B, T, d]` before the output norm.
    pub fn hidden(&self, cx: &Ctx, tokens: &[u32], segments: Option<&[u32]>, batch: usize) -> Result<Var> {
        let x = self.embed(cx, tokens, batch)?;
        self.blocks_forward(cx, x, segments)
    }

    /// Runs the block stack on embedded inputs `[B, T, d]`.
    pub fn blocks_forward(&self, cx: &Ctx, mut x: Var, segments: Option<&[u32]>) -> Result<Var> {
        let t = cx.tape;
        let cfg = &self.cfg;
        if x.shape().len() != 3 || x.shape()[2] != cfg.d {
            return Err(Error::Dimension(format!("expected [B, T, {}] inputs, got {:?}", cfg.d, x.shape())));
        }
        let (batch, len) = (x.shape()[0], x.shape()[1]);
        let n = batch * len;
        if cfg.kind == ModelKind::FlashQuad && len != cfg.context {
            return Err(Error::Config(format!(
                "flash_quad model is built for length {}, got {len}",
                cfg.context
            )));
        }
        let mask = if cfg.kind == ModelKind::Flash {
            if len % cfg.chunk != 0 {
                return Err(Error::Config(format!(
                    "chunk size {} must divide sequence length {len}",
                    cfg.chunk
                )));
            }
            let zeros;
            let ids = match segments {
                Some(s) if s.len() == n => s,
                Some(s) => return Err(Error::Dimension(format!("{} segment ids for {n} tokens", s.len()))),
                None => {
                    zeros = alloc::vec![0u32; n];
                    &zeros
                }
            };
            Some(segment_mask(ids, batch, len / cfg.chunk, cfg.chunk, cfg.causal, cfg.aggregation)?)
        } else {
            None
        };
        for block in &self.blocks {
            x = match block {
                Block::Gau(b) => b.forward(cx, &x, cfg.causal)?,
                Block::Linear(b) => b.forward(cx, &x, cfg.causal)?,
                Block::Mhsa(b) => b.forward(cx, &x, cfg.causal)?,
                Block::Glu(b) => b.forward(cx, &x)?,
                Block::Mlp(b) => b.forward(cx, &x)?,
                Block::Flash(b) => {
                    let g = len / cfg.chunk;
                    let xc = t.reshape(&x, &[batch, g, cfg.chunk, cfg.d])?;
                    let mask = mask.as_ref().ok_or_else(|| Error::Invalid("missing segment mask".into()))?;
                    let y = b.forward(cx, &xc, mask, cfg.causal)?;
                    t.reshape(&y, &[batch, len, cfg.d])?
                }
            };
        }
        Ok(x)
    }

    /// Output norm and projection to logits over the vocabulary.
    pub fn project(&self, cx: &Ctx, hidden: &Var) -> Result<Var> {
        let t = cx.tape;
        let h = self.final_norm.forward(cx, hidden)?;
        let rank = h.shape().len();
        let lead: alloc::string::String = (b'a'..b'h').take(rank - 1).map(char::from).collect();
        match self.head {
            None => t.contract(&h, cx.p(self.embed), &format!("{lead}d,vd->{lead}v")),
            Some(w) => t.contract(&h, cx.p(w), &format!("{lead}d,dv->{lead}v")),
        }
    }

    /// Logits `[B, T, vocab]`.
    pub fn logits(&self, cx: &Ctx, tokens: &[u32], segments: Option<&[u32]>, batch: usize) -> Result<Var> {
        let h = self.hidden(cx, tokens, segments, batch)?;
        self.project(cx, &h)
    }

    /// Mean next-token cross-entropy in nats; `targets[i]` is the byte that
    /// follows `inputs[i]`.
    pub fn lm_loss(
        &self,
        cx: &Ctx,
        inputs: &[u32],
        targets: &[u32],
        segments: Option<&[u32]>,
        batch: usize,
    ) -> Result<Var> {
        if !self.cfg.causal {
            return Err(Error::Config("language-model loss needs a causal model".into()));
        }
        if targets.len() != inputs.len() {
            return Err(Error::Dimension(format!("{} targets for {} inputs", targets.len(), inputs.len())));
        }
        let logits = self.logits(cx, inputs, segments, batch)?;
        let flat = cx.tape.reshape(&logits, &[inputs.len(), self.cfg.vocab])?;
        let targets: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
        cx.tape.cross_entropy(&flat, &targets, None)
    }

    /// Masked-language-model loss averaged over the masked positions.
    pub fn mlm_loss(&self, cx: &Ctx, tokens: &[u32], segments: Option<&[u32]>, batch: usize, rng: &mut impl Rng) -> Result<Var> {
        if self.cfg.causal {
            return Err(Error::Config("masked-language-model loss needs a non-causal model".into()));
        }
        if self.cfg.vocab <= MASK_ID as usize {
            return Err(Error::Config(format!("vocab {} has no room for the mask id", self.cfg.vocab)));
        }
        let masked = mlm_mask(tokens, rng);
        let logits = self.logits(cx, &masked.inputs, segments, batch)?;
        let flat = cx.tape.reshape(&logits, &[tokens.len(), self.cfg.vocab])?;
        let targets: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        cx.tape.cross_entropy(&flat, &targets, Some(&masked.weights))
    }
}

/// Corrupted inputs and per-position loss weights for masked language modeling.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmMask {
    pub inputs: Vec<u32>,
    /// 1 at selected positions, 0 elsewhere.
    pub weights: Vec<f64>,
}

/// Selects 15% of positions; of those 80% become [`MASK_ID`], 10% a random
/// byte and 10% stay. Resamples until at least one position is selected.
pub fn mlm_mask(tokens: &[u32], rng: &mut impl Rng) -> MlmMask {
    loop {
        let mut inputs = tokens.to_vec();
        let mut weights = alloc::vec![0.0; tokens.len()];
        for (i, slot) in inputs.iter_mut().enumerate() {
            if rng.random::<f64>() >= 0.15 {
                continue;
            }
            weights[i] = 1.0;
            let r = rng.random::<f64>();
            if r < 0.8 {
                *slot = MASK_ID;
            } else if r < 0.9 {
                *slot = rng.random_range(0..BYTE_VOCAB as u32);
            }
        }
        if tokens.is_empty() || weights.iter().any(|&w| w > 0.0) {
            return MlmMask { inputs, weights };
        }
    }
}

/// Values of every parameter, in id order.
pub fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.values().to_vec()
}

#[cfg(test)]
mod tests;
