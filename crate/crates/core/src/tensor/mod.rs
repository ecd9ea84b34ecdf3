//! Dense row-major tensors and the forward kernels every differentiable op
//! is built from.
//!
//! Kernels here are plain functions over [`Tensor`] values; the tape in
//! [`crate::autodiff`] wraps them with backward rules. Broadcasting follows
//! right-aligned (trailing-axis) semantics where any extent of 1 stretches.

mod contract;
mod walk;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

pub use contract::{contract, ContractSpec};
pub(crate) use walk::walk;

/// A dense N-dimensional array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for (i, &n) in shape.iter().enumerate().rev() {
        out[i] = acc;
        acc *= n;
    }
    out
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(Error::ElementCount {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(dim_err!("item() on tensor of shape {:?}", self.shape))
        }
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&k, &n)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(k < n, "index {k} out of bounds on axis {i}");
            off = off * n + k;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn into_shape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|x| x * x).sum::<f64>())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(dim_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_binary(self, other, |a, b| a * b)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis < rank {
        Ok(())
    } else {
        Err(Error::Axis { axis, rank })
    }
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; stretched axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Elementwise `f(a, b)` under right-aligned broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    if b.numel() == 1 && shape == a.shape {
        let y = b.data[0];
        return Ok(a.map(|x| f(x, y)));
    }
    let n = numel(&shape);
    let mut data = vec![0.0; n];
    let out_str = strides(&shape);
    let a_str = broadcast_strides(&a.shape, &shape);
    let b_str = broadcast_strides(&b.shape, &shape);
    walk(
        &shape,
        [&out_str, &a_str, &b_str],
        |[o, ia, ib], len, [so, sa, sb]| {
            for j in 0..len {
                data[o + j * so] = f(a.data[ia + j * sa], b.data[ib + j * sb]);
            }
        },
    );
    Ok(Tensor { shape, data })
}

/// Sums `t` down to `target`, undoing a right-aligned broadcast.
pub fn sum_to_shape(t: &Tensor, target: &[usize]) -> Result<Tensor> {
    if t.shape == target {
        return Ok(t.clone());
    }
    let check = broadcast_shape(target, &t.shape)?;
    if check != t.shape {
        return Err(dim_err!("cannot reduce {:?} to {:?}", t.shape, target));
    }
    let mut out = Tensor::zeros(target.to_vec());
    let t_str = strides(&t.shape);
    let o_str = broadcast_strides(target, &t.shape);
    walk(&t.shape, [&t_str, &o_str], |[it, io], len, [st, so]| {
        for j in 0..len {
            out.data[io + j * so] += t.data[it + j * st];
        }
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; rank];
    for &ax in axes {
        check_axis(ax, rank)?;
        mask[ax] = true;
    }
    Ok(mask)
}

/// Reduces over `axes`. With `keepdims` the reduced axes stay as extent 1.
pub fn reduce(x: &Tensor, axes: &[usize], kind: ReduceKind, keepdims: bool) -> Result<Tensor> {
    let mask = normalize_axes(axes, x.rank())?;
    let kept: Vec<usize> = x
        .shape
        .iter()
        .zip(&mask)
        .map(|(&n, &m)| if m { 1 } else { n })
        .collect();
    let count: usize = x
        .shape
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&n, _)| n)
        .product();
    let init = match kind {
        ReduceKind::Max => f64::NEG_INFINITY,
        _ => 0.0,
    };
    let mut out = Tensor::full(kept.clone(), init);
    let x_str = strides(&x.shape);
    let o_str = broadcast_strides(&kept, &x.shape);
    walk(&x.shape, [&x_str, &o_str], |[ix, io], len, [sx, so]| {
        for j in 0..len {
            let v = x.data[ix + j * sx];
            let slot = &mut out.data[io + j * so];
            match kind {
                ReduceKind::Max => {
                    if v > *slot {
                        *slot = v
                    }
                }
                _ => *slot += v,
            }
        }
    });
    if kind == ReduceKind::Mean && count > 0 {
        let inv = 1.0 / count as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
    }
    if !keepdims {
        out.shape = x
            .shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| !m)
            .map(|(&n, _)| n)
            .collect();
    }
    Ok(out)
}

/// Flat input index of the first maximum for each output slot of a max-reduction.
pub(crate) fn argmax_indices(x: &Tensor, axes: &[usize]) -> Result<Vec<usize>> {
    let mask = normalize_axes(axes, x.rank())?;
    let kept: Vec<usize> = x
        .shape
        .iter()
        .zip(&mask)
        .map(|(&n, &m)| if m { 1 } else { n })
        .collect();
    let mut best = vec![f64::NEG_INFINITY; numel(&kept)];
    let mut arg = vec![usize::MAX; numel(&kept)];
    let x_str = strides(&x.shape);
    let o_str = broadcast_strides(&kept, &x.shape);
    walk(&x.shape, [&x_str, &o_str], |[ix, io], len, [sx, so]| {
        for j in 0..len {
            let i = ix + j * sx;
            let o = io + j * so;
            if x.data[i] > best[o] || arg[o] == usize::MAX {
                best[o] = x.data[i];
                arg[o] = i;
            }
        }
    });
    Ok(arg)
}

/// Splits `shape` around `axis` into (outer, extent, inner) products.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Cumulative sum along `axis`.
///
/// `exclusive` shifts by one so `out[0] = 0`; `reverse` accumulates from the
/// end of the axis. The scan performs exactly `shape[axis]` dependent steps.
pub fn cumsum(x: &Tensor, axis: usize, exclusive: bool, reverse: bool) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, len, inner) = around(&x.shape, axis);
    let mut out = vec![0.0; x.numel()];
    let mut acc = vec![0.0; inner];
    for o in 0..outer {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for step in 0..len {
            let i = if reverse { len - 1 - step } else { step };
            let base = (o * len + i) * inner;
            let src = &x.data[base..base + inner];
            let dst = &mut out[base..base + inner];
            if exclusive {
                dst.copy_from_slice(&acc);
                acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
            } else {
                acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                dst.copy_from_slice(&acc);
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn transpose(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(dim_err!("permutation {perm:?} for rank {rank}"));
    }
    for &p in perm {
        check_axis(p, rank)?;
        if core::mem::replace(&mut seen[p], true) {
            return Err(dim_err!("repeated axis in permutation {perm:?}"));
        }
    }
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(x.clone());
    }
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let in_str = strides(&x.shape);
    let src_str: Vec<usize> = perm.iter().map(|&p| in_str[p]).collect();
    let out_str = strides(&shape);
    let mut data = vec![0.0; x.numel()];
    walk(&shape, [&out_str, &src_str], |[o, i], len, [so, si]| {
        for j in 0..len {
            data[o + j * so] = x.data[i + j * si];
        }
    });
    Ok(Tensor { shape, data })
}

/// Inverse of a permutation.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Elements `start..start + len` along `axis`.
pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, n, inner) = around(&x.shape, axis);
    if start + len > n {
        return Err(dim_err!(
            "slice {start}..{} exceeds extent {n} on axis {axis}",
            start + len
        ));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor { shape, data })
}

/// Zero-pads `before` and `after` elements along `axis`.
pub fn pad(x: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, n, inner) = around(&x.shape, axis);
    let m = n + before + after;
    let mut data = vec![0.0; outer * m * inner];
    for o in 0..outer {
        let src = o * n * inner;
        let dst = (o * m + before) * inner;
        data[dst..dst + n * inner].copy_from_slice(&x.data[src..src + n * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = m;
    Ok(Tensor { shape, data })
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    check_axis(axis, first.rank())?;
    for x in xs {
        let same = x.rank() == first.rank()
            && x.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(dim_err!(
                "concat along {axis}: {:?} vs {:?}",
                x.shape,
                first.shape
            ));
        }
    }
    let (outer, _, inner) = around(&first.shape, axis);
    let total: usize = xs.iter().map(|x| x.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape[axis] * inner;
            data.extend_from_slice(&x.data[o * n..(o + 1) * n]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Splits along `axis` into pieces of the given sizes.
pub fn split(x: &Tensor, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
    check_axis(axis, x.rank())?;
    if sizes.iter().sum::<usize>() != x.shape[axis] {
        return Err(dim_err!(
            "split sizes {sizes:?} do not sum to extent {}",
            x.shape[axis]
        ));
    }
    let mut start = 0;
    let mut out = Vec::with_capacity(sizes.len());
    for &s in sizes {
        out.push(slice(x, axis, start, s)?);
        start += s;
    }
    Ok(out)
}

/// Repeats the tensor `reps` times along `axis` (block repetition, as `tile`).
pub fn tile(x: &Tensor, axis: usize, reps: usize) -> Result<Tensor> {
    check_axis(axis, x.rank())?;
    let (outer, n, inner) = around(&x.shape, axis);
    let block = n * inner;
    let mut data = Vec::with_capacity(outer * reps * block);
    for o in 0..outer {
        for _ in 0..reps {
            data.extend_from_slice(&x.data[o * block..(o + 1) * block]);
        }
    }
    let mut shape = x.shape.clone();
    shape[axis] = n * reps;
    Ok(Tensor { shape, data })
}

/// Sums the `reps` blocks of a tiled tensor back to extent `shape[axis] / reps`.
pub(crate) fn untile(g: &Tensor, axis: usize, reps: usize) -> Result<Tensor> {
    let (outer, total, inner) = around(&g.shape, axis);
    let n = total / reps;
    let block = n * inner;
    let mut data = vec![0.0; outer * block];
    for o in 0..outer {
        for r in 0..reps {
            let src = &g.data[(o * reps + r) * block..(o * reps + r + 1) * block];
            data[o * block..(o + 1) * block]
                .iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d += s);
        }
    }
    let mut shape = g.shape.clone();
    shape[axis] = n;
    Ok(Tensor { shape, data })
}

/// Row-wise softmax over the last axis.
///
/// With `causal`, entry `(i, j)` of each trailing `[n, m]` block is excluded
/// (probability exactly zero) when `j > i`.
pub fn softmax_last(x: &Tensor, causal: bool) -> Result<Tensor> {
    let rank = x.rank();
    if rank == 0 || (causal && rank < 2) {
        return Err(dim_err!("softmax on shape {:?}", x.shape));
    }
    let m = x.shape[rank - 1];
    let n = if rank >= 2 { x.shape[rank - 2] } else { 1 };
    let mut data = vec![0.0; x.numel()];
    for (r, (src, dst)) in x.data.chunks(m).zip(data.chunks_mut(m)).enumerate() {
        let visible = if causal { (r % n + 1).min(m) } else { m };
        let mx = src[..visible]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..visible {
            let e = libm::exp(src[j] - mx);
            dst[j] = e;
            z += e;
        }
        for v in &mut dst[..visible] {
            *v /= z;
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Rows `ids` of a `[V, d]` table, as `[ids.len(), d]`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(dim_err!(
            "gather_rows needs a matrix, got {:?}",
            table.shape
        ));
    }
    let (v, d) = (table.shape[0], table.shape[1]);
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::Invalid(alloc::format!(
                "row id {id} out of range for table of {v} rows"
            )));
        }
        data.extend_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    Ok(Tensor {
        shape: vec![ids.len(), d],
        data,
    })
}

pub(crate) fn scatter_add_rows(g: &Tensor, ids: &[usize], rows: usize) -> Tensor {
    let d = g.shape[1];
    let mut out = Tensor::zeros(vec![rows, d]);
    for (r, &id) in ids.iter().enumerate() {
        out.data[id * d..(id + 1) * d]
            .iter_mut()
            .zip(&g.data[r * d..(r + 1) * d])
            .for_each(|(o, s)| *o += s);
    }
    out
}

/// Inverse frequencies `10000^(-k / half)` for `k < half`.
pub fn inv_freq(half: usize) -> Vec<f64> {
    (0..half)
        .map(|k| libm::pow(10000.0, -(k as f64) / half as f64))
        .collect()
}

/// Rotary position embedding.
///
/// `axes` must be consecutive and exclude the last axis; positions enumerate
/// the flattened product of those axes in row-major order and are shared by
/// any axes between them and the feature axis. Features are split into
/// halves `(x1, x2)` and rotated to `(x1 cos - x2 sin, x2 cos + x1 sin)`.
/// `sign = -1.0` applies the inverse rotation. `offset` shifts every position.
pub fn rope(x: &Tensor, axes: &[usize], sign: f64, offset: usize) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(dim_err!("rope needs rank >= 2, got {:?}", x.shape));
    }
    let last = x.shape[rank - 1];
    if !last.is_multiple_of(2) {
        return Err(dim_err!("rope needs an even feature extent, got {last}"));
    }
    let (&a0, &a1) = match (axes.first(), axes.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Invalid(
                "rope needs at least one position axis".into(),
            ))
        }
    };
    if a1 >= rank - 1 || axes.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Invalid(alloc::format!(
            "rope axes {axes:?} must be consecutive and precede the feature axis"
        )));
    }
    let half = last / 2;
    let span = numel(&x.shape[a0..=a1]);
    let after = numel(&x.shape[a1 + 1..rank - 1]);
    let freqs = inv_freq(half);
    let mut sin = vec![0.0; span * half];
    let mut cos = vec![0.0; span * half];
    for p in 0..span {
        let pos = (p + offset) as f64;
        for k in 0..half {
            let (s, c) = libm::sincos(pos * freqs[k]);
            sin[p * half + k] = sign * s;
            cos[p * half + k] = c;
        }
    }
    let mut data = vec![0.0; x.numel()];
    for (r, (src, dst)) in x.data.chunks(last).zip(data.chunks_mut(last)).enumerate() {
        let p = (r / after) % span;
        let (s, c) = (
            &sin[p * half..(p + 1) * half],
            &cos[p * half..(p + 1) * half],
        );
        for k in 0..half {
            let (x1, x2) = (src[k], src[half + k]);
            dst[k] = x1 * c[k] - x2 * s[k];
            dst[half + k] = x2 * c[k] + x1 * s[k];
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}
