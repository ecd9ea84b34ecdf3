use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{self, broadcast_binary, sum_to_shape, ContractSpec, ReduceKind, Tensor};

/// Elementwise unary functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Scale(f64),
    Offset(f64),
    Relu,
    /// `max(x, 0)^2`
    Relu2,
    /// `x * sigmoid(x)`
    Silu,
    /// Exact (erf) GELU.
    Gelu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    Rsqrt,
    Square,
    Tanh,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(c) => x * c,
            Unary::Offset(c) => x + c,
            Unary::Relu => x.max(0.0),
            Unary::Relu2 => {
                let r = x.max(0.0);
                r * r
            }
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)),
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => libm::exp(x),
            Unary::Ln => libm::log(x),
            Unary::Sqrt => libm::sqrt(x),
            Unary::Rsqrt => 1.0 / libm::sqrt(x),
            Unary::Square => x * x,
            Unary::Tanh => libm::tanh(x),
        }
    }

    /// `f'(x)` given the input `x` and output `y = f(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(c) => c,
            Unary::Offset(_) => 1.0,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Relu2 => 2.0 * x.max(0.0),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Gelu => {
                0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Rsqrt => -0.5 * y * y * y,
            Unary::Square => 2.0 * x,
            Unary::Tanh => 1.0 - y * y,
        }
    }

    fn uses_output(self) -> bool {
        matches!(
            self,
            Unary::Sigmoid | Unary::Exp | Unary::Sqrt | Unary::Rsqrt | Unary::Tanh
        )
    }

    fn is_linear(self) -> bool {
        matches!(self, Unary::Neg | Unary::Scale(_) | Unary::Offset(_))
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tape {
    fn binary(&self, a: &Var, b: &Var, op: Binary) -> Result<Var> {
        let value = match op {
            Binary::Add => broadcast_binary(a.value(), b.value(), |x, y| x + y)?,
            Binary::Sub => broadcast_binary(a.value(), b.value(), |x, y| x - y)?,
            Binary::Mul => broadcast_binary(a.value(), b.value(), |x, y| x * y)?,
            Binary::Div => broadcast_binary(a.value(), b.value(), |x, y| x / y)?,
        };
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        let product = matches!(op, Binary::Mul | Binary::Div);
        let av = (need_b && product).then(|| a.rc());
        let bv = ((need_a && product) || (need_b && matches!(op, Binary::Div))).then(|| b.rc());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(value, &[a, b], move |g| {
            let other = |v: &Option<Rc<Tensor>>| -> Result<Rc<Tensor>> {
                v.clone()
                    .ok_or_else(|| Error::Invalid("binary backward: operand not retained".into()))
            };
            let ga = if need_a {
                let full = match op {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => broadcast_binary(g, &*other(&bv)?, |g, y| g * y)?,
                    Binary::Div => broadcast_binary(g, &*other(&bv)?, |g, y| g / y)?,
                };
                Some(sum_to_shape(&full, &sa)?)
            } else {
                None
            };
            let gb = if need_b {
                let full = match op {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.map(|v| -v),
                    Binary::Mul => broadcast_binary(g, &*other(&av)?, |g, x| g * x)?,
                    Binary::Div => {
                        let q =
                            broadcast_binary(&*other(&av)?, &*other(&bv)?, |x, y| -x / (y * y))?;
                        broadcast_binary(g, &q, |g, q| g * q)?
                    }
                };
                Some(sum_to_shape(&full, &sb)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `a + b` with right-aligned broadcasting.
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&self, a: &Var, b: &Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn map(&self, x: &Var, f: Unary) -> Result<Var> {
        let value = x.value().map(|v| f.apply(v));
        if f.is_linear() {
            return Ok(self.record(value, &[x], move |g| {
                Ok(vec![Some(g.map(|v| v * f.derivative(0.0, 0.0)))])
            }));
        }
        let value = Rc::new(value);
        // Each derivative reads either the input or the output, never both.
        let saved = if f.uses_output() {
            Rc::clone(&value)
        } else {
            x.rc()
        };
        let use_y = f.uses_output();
        Ok(self.record_rc(value, &[x], move |g| {
            let data = g
                .data()
                .iter()
                .zip(saved.data())
                .map(|(g, &s)| {
                    let d = if use_y {
                        f.derivative(0.0, s)
                    } else {
                        f.derivative(s, 0.0)
                    };
                    g * d
                })
                .collect();
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        }))
    }

    pub fn scale(&self, x: &Var, c: f64) -> Result<Var> {
        self.map(x, Unary::Scale(c))
    }

    /// Einsum-style contraction; see [`ContractSpec`].
    pub fn contract(&self, a: &Var, b: &Var, spec: &str) -> Result<Var> {
        let spec = ContractSpec::parse(spec)?;
        self.contract_with(a, b, &spec)
    }

    pub fn contract_with(&self, a: &Var, b: &Var, spec: &ContractSpec) -> Result<Var> {
        let value = tensor::contract(a.value(), b.value(), spec)?;
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        let av = need_b.then(|| a.rc());
        let bv = need_a.then(|| b.rc());
        let (spec_a, spec_b) = (spec.grad_a(), spec.grad_b());
        Ok(self.record(value, &[a, b], move |g| {
            let ga = match &bv {
                Some(b) => Some(tensor::contract(g, b, &spec_a)?),
                None => None,
            };
            let gb = match &av {
                Some(a) => Some(tensor::contract(a, g, &spec_b)?),
                None => None,
            };
            Ok(vec![ga, gb])
        }))
    }

    /// Reduction over `axes`; see [`tensor::reduce`].
    pub fn reduce(&self, x: &Var, axes: &[usize], kind: ReduceKind, keepdims: bool) -> Result<Var> {
        let value = tensor::reduce(x.value(), axes, kind, keepdims)?;
        let in_shape = x.shape().to_vec();
        let kept: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &n)| if axes.contains(&i) { 1 } else { n })
            .collect();
        let count: usize = axes.iter().map(|&a| in_shape[a]).product();
        let argmax = if kind == ReduceKind::Max && x.requires_grad() && self.recording {
            tensor::argmax_indices(x.value(), axes)?
        } else {
            Vec::new()
        };
        Ok(self.record(value, &[x], move |g| {
            let g = g.reshape(kept.clone())?;
            let gx = match kind {
                ReduceKind::Sum => {
                    broadcast_binary(&Tensor::zeros(in_shape.clone()), &g, |_, g| g)?
                }
                ReduceKind::Mean => {
                    let inv = if count > 0 { 1.0 / count as f64 } else { 0.0 };
                    broadcast_binary(&Tensor::zeros(in_shape.clone()), &g, |_, g| g * inv)?
                }
                ReduceKind::Max => {
                    let mut out = Tensor::zeros(in_shape.clone());
                    for (o, &i) in argmax.iter().enumerate() {
                        out.data_mut()[i] += g.data()[o];
                    }
                    out
                }
            };
            Ok(vec![Some(gx)])
        }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&self, x: &Var) -> Result<Var> {
        let axes: Vec<usize> = (0..x.value().rank()).collect();
        self.reduce(x, &axes, ReduceKind::Sum, false)
    }

    /// Cumulative sum along `axis`; backward is the reversed scan.
    pub fn cumsum(&self, x: &Var, axis: usize, exclusive: bool) -> Result<Var> {
        let value = tensor::cumsum(x.value(), axis, exclusive, false)?;
        Ok(self.record(value, &[x], move |g| {
            Ok(vec![Some(tensor::cumsum(g, axis, exclusive, true)?)])
        }))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let value = x.value().reshape(shape.to_vec())?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(value, &[x], move |g| {
            Ok(vec![Some(g.reshape(in_shape.clone())?)])
        }))
    }

    pub fn transpose(&self, x: &Var, perm: &[usize]) -> Result<Var> {
        let value = tensor::transpose(x.value(), perm)?;
        let inv = tensor::invert_perm(perm);
        Ok(self.record(value, &[x], move |g| {
            Ok(vec![Some(tensor::transpose(g, &inv)?)])
        }))
    }

    pub fn slice(&self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice(x.value(), axis, start, len)?;
        let n = x.shape()[axis];
        Ok(self.record(value, &[x], move |g| {
            Ok(vec![Some(tensor::pad(g, axis, start, n - start - len)?)])
        }))
    }

    pub fn pad(&self, x: &Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let value = tensor::pad(x.value(), axis, before, after)?;
        let n = x.shape()[axis];
        Ok(self.record(value, &[x], move |g| {
            Ok(vec![Some(tensor::slice(g, axis, before, n)?)])
        }))
    }

    pub fn split(&self, x: &Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        if sizes.iter().sum::<usize>() != *x.shape().get(axis).unwrap_or(&0) {
            return Err(dim_err!(
                "split sizes {sizes:?} do not match shape {:?} on axis {axis}",
                x.shape()
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn concat(&self, xs: &[&Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = xs.iter().map(|v| v.value()).collect();
        let value = tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = xs.iter().map(|v| v.shape()[axis]).collect();
        Ok(self.record(value, xs, move |g| {
            Ok(tensor::split(g, axis, &sizes)?
                .into_iter()
                .map(Some)
                .collect())
        }))
    }

    pub fn tile(&self, x: &Var, axis: usize, reps: usize) -> Result<Var> {
        let value = tensor::tile(x.value(), axis, reps)?;
        Ok(self.record(value, &[x], move |g| {
            Ok(vec![Some(tensor::untile(g, axis, reps)?)])
        }))
    }

    /// Softmax over the last axis, optionally with a causal `[n, m]` mask.
    pub fn softmax(&self, x: &Var, causal: bool) -> Result<Var> {
        let value = tensor::softmax_last(x.value(), causal)?;
        let y = Rc::new(value.clone());
        Ok(self.record(value, &[x], move |g| {
            let m = *y.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; g.numel()];
            for ((gr, yr), dr) in g
                .data()
                .chunks(m)
                .zip(y.data().chunks(m))
                .zip(data.chunks_mut(m))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for j in 0..m {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        }))
    }

    /// Normalizes the last axis: `(x - mean) / sqrt(var + eps)` when
    /// `center`, else `x / sqrt(mean(x^2) + eps)`.
    pub fn normalize_last(&self, x: &Var, eps: f64, center: bool) -> Result<Var> {
        let m = *x
            .shape()
            .last()
            .ok_or_else(|| dim_err!("normalize_last needs rank >= 1"))?;
        let rows = x.value().numel() / m.max(1);
        let mut y = vec![0.0; x.value().numel()];
        let mut rs = vec![0.0; rows];
        for (r, (src, dst)) in x.value().data().chunks(m).zip(y.chunks_mut(m)).enumerate() {
            let mu = if center {
                src.iter().sum::<f64>() / m as f64
            } else {
                0.0
            };
            let ms = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
            let inv = 1.0 / libm::sqrt(ms + eps);
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mu) * inv;
            }
            rs[r] = inv;
        }
        let value = Rc::new(Tensor::new(x.shape().to_vec(), y)?);
        let y = value.clone();
        Ok(self.record_rc(value, &[x], move |g| {
            let mut data = vec![0.0; g.numel()];
            for (r, ((gr, yr), dr)) in g
                .data()
                .chunks(m)
                .zip(y.data().chunks(m))
                .zip(data.chunks_mut(m))
                .enumerate()
            {
                let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                let gm = if center {
                    gr.iter().sum::<f64>() / m as f64
                } else {
                    0.0
                };
                for j in 0..m {
                    dr[j] = rs[r] * (gr[j] - gm - yr[j] * gy);
                }
            }
            Ok(vec![Some(Tensor::new(g.shape().to_vec(), data)?)])
        }))
    }

    /// Rows of a `[V, d]` table.
    pub fn gather_rows(&self, table: &Var, ids: &[usize]) -> Result<Var> {
        let value = tensor::gather_rows(table.value(), ids)?;
        let ids = ids.to_vec();
        let rows = table.shape()[0];
        Ok(self.record(value, &[table], move |g| {
            Ok(vec![Some(tensor::scatter_add_rows(g, &ids, rows))])
        }))
    }

    /// Rotary position embedding over the flattened `axes`; see [`tensor::rope`].
    pub fn rope(&self, x: &Var, axes: &[usize], offset: usize) -> Result<Var> {
        let value = tensor::rope(x.value(), axes, 1.0, offset)?;
        let axes = axes.to_vec();
        Ok(self.record(value, &[x], move |g| {
            Ok(vec![Some(tensor::rope(g, &axes, -1.0, offset)?)])
        }))
    }

    /// Weighted mean cross-entropy of `[N, V]` logits against class targets.
    ///
    /// Rows with weight 0 do not contribute; the result is
    /// `sum_i w_i * (-log softmax(logits_i)[t_i]) / sum_i w_i`.
    pub fn cross_entropy(
        &self,
        logits: &Var,
        targets: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err!(
                "cross_entropy: logits {shape:?} vs {} targets",
                targets.len()
            ));
        }
        let (n, v) = (shape[0], shape[1]);
        let w: Vec<f64> = match weights {
            Some(w) if w.len() == n => w.to_vec(),
            Some(w) => return Err(dim_err!("{} weights for {n} rows", w.len())),
            None => vec![1.0; n],
        };
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::Invalid(
                "cross_entropy: all row weights are zero".into(),
            ));
        }
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for (i, row) in logits.value().data().chunks(v).enumerate() {
            let t = targets[i];
            if t >= v {
                return Err(Error::Invalid(alloc::format!(
                    "target {t} out of range for {v} classes"
                )));
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| libm::exp(x - mx)).sum();
            let lse = mx + libm::log(z);
            if w[i] != 0.0 {
                loss += w[i] * (lse - row[t]);
            }
            for j in 0..v {
                probs[i * v + j] = libm::exp(row[j] - lse);
            }
        }
        let value = Tensor::scalar(loss / total);
        let targets = targets.to_vec();
        Ok(self.record(value, &[logits], move |g| {
            let g = g.item()?;
            let mut data = probs.clone();
            for i in 0..n {
                let c = g * w[i] / total;
                let row = &mut data[i * v..(i + 1) * v];
                row[targets[i]] -= 1.0;
                row.iter_mut().for_each(|x| *x *= c);
            }
            Ok(vec![Some(Tensor::new(vec![n, v], data)?)])
        }))
    }
}
