//! Einsum-style batched tensor contraction.
//!
//! A spec such as `"bnd,bmd->bnm"` names one label per axis of each operand
//! and of the result. Every label is classified as
//!
//! * batch: in both operands and the result,
//! * left free: only in the left operand and the result,
//! * right free: only in the right operand and the result,
//! * contracted: in both operands but not the result.
//!
//! A label that appears in a single operand and nowhere else is rejected, as
//! is a repeated label within one operand. These rules are closed under
//! differentiation: the gradient of a valid contraction with respect to
//! either operand is again a valid contraction (see [`ContractSpec::grad_a`]).
//!
//! Each batch element is one strided GEMM. Operands whose free and
//! contracted label groups are already laid out contiguously are passed to
//! the kernel through strides; otherwise they are permuted into canonical
//! order first.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::{strides, transpose, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContractSpec {
    a: Vec<u8>,
    b: Vec<u8>,
    out: Vec<u8>,
}

impl fmt::Display for ContractSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[u8]| String::from_utf8_lossy(v).into_owned();
        write!(f, "{},{}->{}", s(&self.a), s(&self.b), s(&self.out))
    }
}

impl ContractSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = |reason: &str| Error::Contraction {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let compact: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (inputs, out) = compact
            .split_once("->")
            .ok_or_else(|| bad("missing `->`"))?;
        let (a, b) = inputs
            .split_once(',')
            .ok_or_else(|| bad("expected two operands"))?;
        let labels = |s: &str| -> Result<Vec<u8>> {
            if s.bytes().all(|c| c.is_ascii_alphabetic()) {
                Ok(s.as_bytes().to_vec())
            } else {
                Err(bad("labels must be ascii letters"))
            }
        };
        let parsed = Self {
            a: labels(a)?,
            b: labels(b)?,
            out: labels(out)?,
        };
        parsed.validate()?;
        Ok(parsed)
    }

    fn validate(&self) -> Result<()> {
        let err = |reason: String| Error::Contraction {
            spec: self.to_string(),
            reason,
        };
        for (name, labels) in [("left", &self.a), ("right", &self.b), ("output", &self.out)] {
            for (i, l) in labels.iter().enumerate() {
                if labels[..i].contains(l) {
                    return Err(err(alloc::format!(
                        "label `{}` repeated in {name} operand",
                        *l as char
                    )));
                }
            }
        }
        let orphan = |l: &u8, x: &[u8], y: &[u8]| !x.contains(l) && !y.contains(l);
        for l in &self.a {
            if orphan(l, &self.b, &self.out) {
                return Err(err(alloc::format!(
                    "label `{}` appears only once",
                    *l as char
                )));
            }
        }
        for l in &self.b {
            if orphan(l, &self.a, &self.out) {
                return Err(err(alloc::format!(
                    "label `{}` appears only once",
                    *l as char
                )));
            }
        }
        for l in &self.out {
            if orphan(l, &self.a, &self.b) {
                return Err(err(alloc::format!(
                    "output label `{}` missing from operands",
                    *l as char
                )));
            }
        }
        Ok(())
    }

    /// Spec computing the gradient of the left operand from `(grad_out, b)`.
    pub fn grad_a(&self) -> Self {
        Self {
            a: self.out.clone(),
            b: self.b.clone(),
            out: self.a.clone(),
        }
    }

    /// Spec computing the gradient of the right operand from `(a, grad_out)`.
    pub fn grad_b(&self) -> Self {
        Self {
            a: self.a.clone(),
            b: self.out.clone(),
            out: self.b.clone(),
        }
    }
}

/// Stride of a contiguous label group inside a tensor, if the group occupies
/// consecutive axes in the given order. Empty groups are trivially contiguous.
fn group_stride(labels: &[u8], strides: &[usize], group: &[u8]) -> Option<usize> {
    if group.is_empty() {
        return Some(0);
    }
    let pos: Vec<usize> = group
        .iter()
        .map(|l| labels.iter().position(|x| x == l))
        .collect::<Option<_>>()?;
    if pos.windows(2).all(|w| w[1] == w[0] + 1) {
        Some(strides[*pos.last()?])
    } else {
        None
    }
}

fn permuted(t: &Tensor, labels: &[u8], order: &[u8]) -> Result<Tensor> {
    let perm: Vec<usize> = order
        .iter()
        .map(|l| labels.iter().position(|x| x == l).unwrap_or(0))
        .collect();
    transpose(t, &perm)
}

struct Operand<'a> {
    data: &'a [f64],
    labels: Vec<u8>,
    strides: Vec<usize>,
    rs: usize,
    cs: usize,
}

fn prepare<'a>(
    t: &'a Tensor,
    labels: &[u8],
    rows: &[u8],
    cols: &[u8],
    batch: &[u8],
    scratch: &'a mut Option<Tensor>,
) -> Result<Operand<'a>> {
    let st = strides(t.shape());
    if let (Some(rs), Some(cs)) = (
        group_stride(labels, &st, rows),
        group_stride(labels, &st, cols),
    ) {
        return Ok(Operand {
            data: t.data(),
            labels: labels.to_vec(),
            strides: st,
            rs,
            cs,
        });
    }
    let order: Vec<u8> = batch.iter().chain(rows).chain(cols).copied().collect();
    let copy = scratch.insert(permuted(t, labels, &order)?);
    let st = strides(copy.shape());
    let rs = group_stride(&order, &st, rows).unwrap_or(0);
    let cs = group_stride(&order, &st, cols).unwrap_or(0);
    Ok(Operand {
        data: copy.data(),
        labels: order,
        strides: st,
        rs,
        cs,
    })
}

fn batch_strides(op_labels: &[u8], op_strides: &[usize], batch: &[u8]) -> Vec<usize> {
    batch
        .iter()
        .map(|l| {
            let p = op_labels.iter().position(|x| x == l).unwrap_or(0);
            op_strides[p]
        })
        .collect()
}

const NAIVE_LIMIT: usize = 2048;

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m * n * k <= NAIVE_LIMIT {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                c[i * rsc + j * csc] = acc;
            }
        }
        return;
    }
    // SAFETY: the caller sizes every slice so that all indices
    // `i * rs + j * cs` for `i < rows`, `j < cols` fall inside it, and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Contracts `a` and `b` according to `spec`.
pub fn contract(a: &Tensor, b: &Tensor, spec: &ContractSpec) -> Result<Tensor> {
    if a.rank() != spec.a.len() || b.rank() != spec.b.len() {
        return Err(dim_err!(
            "contraction {spec}: operand ranks {} and {} do not match the labels",
            a.rank(),
            b.rank()
        ));
    }
    let mut extent = [usize::MAX; 128];
    for (labels, t) in [(&spec.a, a), (&spec.b, b)] {
        for (&l, &n) in labels.iter().zip(t.shape()) {
            let slot = &mut extent[l as usize];
            if *slot != usize::MAX && *slot != n {
                return Err(dim_err!(
                    "contraction {spec}: label `{}` has extents {} and {n}",
                    l as char,
                    *slot
                ));
            }
            *slot = n;
        }
    }
    let in_a = |l: &u8| spec.a.contains(l);
    let in_b = |l: &u8| spec.b.contains(l);
    let batch: Vec<u8> = spec
        .out
        .iter()
        .copied()
        .filter(|l| in_a(l) && in_b(l))
        .collect();
    let lfree: Vec<u8> = spec
        .out
        .iter()
        .copied()
        .filter(|l| in_a(l) && !in_b(l))
        .collect();
    let rfree: Vec<u8> = spec
        .out
        .iter()
        .copied()
        .filter(|l| in_b(l) && !in_a(l))
        .collect();
    let contr: Vec<u8> = spec
        .a
        .iter()
        .copied()
        .filter(|l| in_b(l) && !spec.out.contains(l))
        .collect();
    let size = |g: &[u8]| g.iter().map(|&l| extent[l as usize]).product::<usize>();
    let (m, n, k) = (size(&lfree), size(&rfree), size(&contr));

    let out_shape: Vec<usize> = spec.out.iter().map(|&l| extent[l as usize]).collect();
    let mut out = Tensor::zeros(out_shape.clone());
    if out.numel() == 0 || k == 0 {
        return Ok(out);
    }

    let mut a_scratch = None;
    let mut b_scratch = None;
    let pa = prepare(a, &spec.a, &lfree, &contr, &batch, &mut a_scratch)?;
    let pb = prepare(b, &spec.b, &contr, &rfree, &batch, &mut b_scratch)?;

    let out_strides = strides(&out_shape);
    let direct = group_stride(&spec.out, &out_strides, &lfree).zip(group_stride(
        &spec.out,
        &out_strides,
        &rfree,
    ));
    let (c_labels, c_shape) = match direct {
        Some(_) => (spec.out.clone(), out_shape.clone()),
        None => {
            let order: Vec<u8> = batch.iter().chain(&lfree).chain(&rfree).copied().collect();
            let shape = order.iter().map(|&l| extent[l as usize]).collect();
            (order, shape)
        }
    };
    let c_strides = strides(&c_shape);
    let rsc = group_stride(&c_labels, &c_strides, &lfree).unwrap_or(0);
    let csc = group_stride(&c_labels, &c_strides, &rfree).unwrap_or(0);
    let mut c_buf = match direct {
        Some(_) => core::mem::take(out.data_mut_vec()),
        None => vec![0.0; out.numel()],
    };

    let batch_ext: Vec<usize> = batch.iter().map(|&l| extent[l as usize]).collect();
    let sa = batch_strides(&pa.labels, &pa.strides, &batch);
    let sb = batch_strides(&pb.labels, &pb.strides, &batch);
    let sc = batch_strides(&c_labels, &c_strides, &batch);
    let span =
        |rows: usize, rs: usize, cols: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    let (la, lb, lc) = (
        span(m, pa.rs, k, pa.cs),
        span(k, pb.rs, n, pb.cs),
        span(m, rsc, n, csc),
    );

    let mut idx = vec![0usize; batch.len()];
    let (mut oa, mut ob, mut oc) = (0usize, 0usize, 0usize);
    let batches: usize = batch_ext.iter().product();
    for _ in 0..batches {
        gemm(
            m,
            k,
            n,
            &pa.data[oa..oa + la],
            pa.rs,
            pa.cs,
            &pb.data[ob..ob + lb],
            pb.rs,
            pb.cs,
            &mut c_buf[oc..oc + lc],
            rsc,
            csc,
        );
        for ax in (0..batch.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            oc += sc[ax];
            if idx[ax] < batch_ext[ax] {
                break;
            }
            oa -= sa[ax] * batch_ext[ax];
            ob -= sb[ax] * batch_ext[ax];
            oc -= sc[ax] * batch_ext[ax];
            idx[ax] = 0;
        }
    }

    match direct {
        Some(_) => {
            *out.data_mut_vec() = c_buf;
            Ok(out)
        }
        None => {
            let tmp = Tensor::new(c_shape, c_buf)?;
            permuted(&tmp, &c_labels, &spec.out)
        }
    }
}

impl Tensor {
    fn data_mut_vec(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }
}
