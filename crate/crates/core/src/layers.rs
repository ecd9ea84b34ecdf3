//! Parametric building blocks shared by every model kind.
//!
//! Each layer owns [`ParamId`]s into a [`ParamStore`] and evaluates against a
//! [`Ctx`] that binds those parameters to a tape.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Unary, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Ctx, Init, ParamId, ParamStore, INIT_STD};
use crate::tensor::{inv_freq, Tensor};

/// Normalization epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// Sequence length from which [`RelBias`] switches to the factorized form.
pub const REL_BIAS_THRESHOLD: usize = 512;

/// Width of the two factor vectors of the factorized relative bias.
pub const REL_BIAS_RANK: usize = 128;

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), init, [in_dim, out_dim], INIT_STD);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> Result<Var> {
        let rank = x.shape().len();
        if rank == 0 || x.shape()[rank - 1] != self.in_dim {
            return Err(dim_err!(
                "dense expects last extent {}, got {:?}",
                self.in_dim,
                x.shape()
            ));
        }
        let t = cx.tape;
        let y = t.contract(x, cx.p(self.weight), &batched_spec(rank - 1, "i,io", "o"))?;
        t.add(&y, cx.p(self.bias))
    }
}

/// Spec `<lead>i<rhs>-><lead><out>` with `lead` fresh leading labels.
fn batched_spec(lead: usize, rhs: &str, out: &str) -> String {
    let labels: String = (b'a'..b'h').take(lead).map(char::from).collect();
    format!("{labels}{rhs}->{labels}{out}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    Layer,
    Scale,
}

/// LayerNorm (`gamma`, `beta` over the last axis) or ScaleNorm (one scalar).
#[derive(Clone, Debug)]
pub enum Norm {
    Layer { gamma: ParamId, beta: ParamId },
    Scale { scalar: ParamId },
}

impl Norm {
    pub fn new(store: &mut ParamStore, kind: NormKind, name: &str, d: usize) -> Self {
        match kind {
            NormKind::Layer => Norm::Layer {
                gamma: store.add(format!("{name}.gamma"), Tensor::ones([d])),
                beta: store.add(format!("{name}.beta"), Tensor::zeros([d])),
            },
            NormKind::Scale => Norm::Scale {
                scalar: store.add(format!("{name}.scalar"), Tensor::scalar(1.0)),
            },
        }
    }

    pub fn param_count(kind: NormKind, d: usize) -> usize {
        match kind {
            NormKind::Layer => 2 * d,
            NormKind::Scale => 1,
        }
    }

    pub fn forward(&self, cx: &Ctx, x: &Var) -> Result<Var> {
        let t = cx.tape;
        match self {
            Norm::Layer { gamma, beta } => {
                let y = t.normalize_last(x, NORM_EPS, true)?;
                let y = t.mul(&y, cx.p(*gamma))?;
                t.add(&y, cx.p(*beta))
            }
            Norm::Scale { scalar } => {
                let y = t.normalize_last(x, NORM_EPS, false)?;
                t.mul(&y, cx.p(*scalar))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu2,
    Silu,
    Gelu,
    /// Softmax over the last axis.
    SoftmaxRows,
}

pub fn activation(cx: &Ctx, x: &Var, kind: Activation) -> Result<Var> {
    let t = cx.tape;
    match kind {
        Activation::Relu2 => t.map(x, Unary::Relu2),
        Activation::Silu => t.map(x, Unary::Silu),
        Activation::Gelu => t.map(x, Unary::Gelu),
        Activation::SoftmaxRows => t.softmax(x, false),
    }
}

/// Per-head, per-dimension affine maps of a shared `[.., s]` representation.
#[derive(Clone, Debug)]
pub struct ScaleOffset {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl ScaleOffset {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, heads: usize, dim: usize) -> Self {
        Self {
            gamma: store.add_normal(format!("{name}.gamma"), init, [heads, dim], INIT_STD),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([heads, dim])),
            heads,
            dim,
        }
    }

    pub fn param_count(heads: usize, dim: usize) -> usize {
        2 * heads * dim
    }

    /// `[.., s] -> [.., H, s]`, head `h` being `z * gamma[h] + beta[h]`.
    pub fn forward(&self, cx: &Ctx, z: &Var) -> Result<Var> {
        let t = cx.tape;
        let mut shape = z.shape().to_vec();
        if shape.last() != Some(&self.dim) {
            return Err(dim_err!(
                "scale_offset expects last extent {}, got {shape:?}",
                self.dim
            ));
        }
        shape.insert(shape.len() - 1, 1);
        let z = t.reshape(z, &shape)?;
        let y = t.mul(&z, cx.p(self.gamma))?;
        t.add(&y, cx.p(self.beta))
    }

    /// The single head `head`, shaped like `z`.
    pub fn head(&self, cx: &Ctx, z: &Var, head: usize) -> Result<Var> {
        if head >= self.heads {
            return Err(Error::Invalid(format!(
                "head {head} out of range for {} heads",
                self.heads
            )));
        }
        let t = cx.tape;
        let g = t.slice(cx.p(self.gamma), 0, head, 1)?;
        let b = t.slice(cx.p(self.beta), 0, head, 1)?;
        let g = t.reshape(&g, &[self.dim])?;
        let b = t.reshape(&b, &[self.dim])?;
        let y = t.mul(z, &g)?;
        t.add(&y, &b)
    }

    /// Splits a `[.., H, s]` output into `H` tensors of shape `[.., s]`.
    pub fn unstack(&self, cx: &Ctx, base: &Var) -> Result<Vec<Var>> {
        let t = cx.tape;
        let rank = base.shape().len();
        let mut out_shape = base.shape().to_vec();
        out_shape.remove(rank - 2);
        t.split(base, rank - 2, &alloc::vec![1; self.heads])?
            .iter()
            .map(|h| t.reshape(h, &out_shape))
            .collect()
    }
}

/// Unscaled sinusoid table `[len, d]`: `sin` in the first half, `cos` in the
/// second, positions starting at `offset`.
pub fn sinusoid_table(len: usize, d: usize, offset: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(dim_err!(
            "sinusoidal embedding needs an even width, got {d}"
        ));
    }
    let half = d / 2;
    let freqs = inv_freq(half);
    let mut data = alloc::vec![0.0; len * d];
    for p in 0..len {
        for (k, f) in freqs.iter().enumerate() {
            let (s, c) = libm::sincos((p + offset) as f64 * f);
            data[p * d + k] = s;
            data[p * d + half + k] = c;
        }
    }
    Tensor::new([len, d], data)
}

/// Sinusoidal absolute positions times one learnable scalar.
#[derive(Clone, Debug)]
pub struct ScaledSin {
    pub scalar: ParamId,
    pub dim: usize,
}

impl ScaledSin {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(dim_err!("scaled sin needs an even width, got {dim}"));
        }
        let init = 1.0 / libm::sqrt(dim as f64);
        Ok(Self {
            scalar: store.add(format!("{name}.scalar"), Tensor::scalar(init)),
            dim,
        })
    }

    /// `[len, d]` embedding for positions `offset..offset + len`.
    pub fn forward(&self, cx: &Ctx, len: usize, offset: usize) -> Result<Var> {
        let table = cx.tape.constant(sinusoid_table(len, self.dim, offset)?);
        cx.tape.mul(&table, cx.p(self.scalar))
    }
}

/// Toeplitz relative position bias for one fixed length.
#[derive(Clone, Debug)]
pub enum RelBias {
    /// One weight per offset, `2n - 1` in total.
    Direct { weight: ParamId, len: usize },
    /// `t[m][n] = <rope(a, m), rope(b, n)>`.
    Factorized { a: ParamId, b: ParamId, len: usize },
}

impl RelBias {
    /// Direct form below [`REL_BIAS_THRESHOLD`], factorized from there on.
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, len: usize) -> Result<Self> {
        if len < REL_BIAS_THRESHOLD {
            Self::direct(store, init, name, len)
        } else {
            Self::factorized(store, init, name, len)
        }
    }

    pub fn direct(store: &mut ParamStore, init: &Init, name: &str, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("relative bias needs length >= 1".into()));
        }
        Ok(RelBias::Direct {
            weight: store.add_normal(format!("{name}.weight"), init, [2 * len - 1], INIT_STD),
            len,
        })
    }

    pub fn factorized(store: &mut ParamStore, init: &Init, name: &str, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("relative bias needs length >= 1".into()));
        }
        Ok(RelBias::Factorized {
            a: store.add_normal(format!("{name}.a"), init, [REL_BIAS_RANK], INIT_STD),
            b: store.add_normal(format!("{name}.b"), init, [REL_BIAS_RANK], INIT_STD),
            len,
        })
    }

    pub fn param_count(len: usize) -> usize {
        if len < REL_BIAS_THRESHOLD {
            2 * len - 1
        } else {
            2 * REL_BIAS_RANK
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RelBias::Direct { len, .. } | RelBias::Factorized { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `[n, n]` bias matrix.
    ///
    /// The direct form pads the weights with `n` zeros, repeats that row `n`
    /// times, drops the trailing `n` entries and reads the result as an
    /// `[n, 3n - 2]` matrix; row `i` is then the weight vector shifted right by
    /// `i`, and the middle `n` columns give `t[i][j] = w[n - 1 + j - i]`.
    pub fn forward(&self, cx: &Ctx) -> Result<Var> {
        let t = cx.tape;
        match *self {
            RelBias::Direct { weight, len: n } => {
                let padded = t.pad(cx.p(weight), 0, 0, n)?;
                let tiled = t.tile(&padded, 0, n)?;
                let trimmed = t.slice(&tiled, 0, 0, n * (3 * n - 1) - n)?;
                let rows = t.reshape(&trimmed, &[n, 3 * n - 2])?;
                t.slice(&rows, 1, n - 1, n)
            }
            RelBias::Factorized { a, b, len: n } => {
                let spread = |p: ParamId| -> Result<Var> {
                    let row = t.reshape(cx.p(p), &[1, REL_BIAS_RANK])?;
                    let rows = t.tile(&row, 0, n)?;
                    t.rope(&rows, &[0], 0)
                };
                t.contract(&spread(a)?, &spread(b)?, "mk,nk->mn")
            }
        }
    }
}
