use alloc::format;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Five-point (fourth-order) stencil instead of the two-point one.
    pub fourth_order: bool,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    /// Coordinates whose error exceeds this are re-measured with steps
    /// `eps / 10^k`, `k = 1..=refine_steps`, keeping the smallest error.
    /// A stencil that straddles a ReLU-type kink converges as the step
    /// shrinks; a wrong derivative does not.
    pub refine_above: Option<f64>,
    pub refine_steps: u32,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            fourth_order: true,
            floor: 1e-8,
            max_coords_per_tensor: None,
            refine_above: None,
            refine_steps: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// `(tensor, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    /// Coordinates that needed a smaller step to pass.
    pub refined: usize,
}

fn eval(f: &impl Fn(&Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> Result<f64> {
    let tape = Tape::inference();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?.value().item()?;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {out}")))
    }
}

/// Compares reverse-mode gradients of the scalar objective `f` against
/// central differences at `params`.
///
/// `f` must be deterministic. Points where `f` is not differentiable (a ReLU
/// kink hit exactly) give meaningless numeric estimates; callers perturb
/// their inputs away from such points.
pub fn finite_difference_check(
    f: impl Fn(&Tape, &[Var]) -> Result<Var>,
    params: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheck> {
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let base = loss.value().item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {base}")));
    }
    let grads = tape.backward(&loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
        refined: 0,
    };
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var)
            .ok_or_else(|| Error::Invalid("leaf lost its gradient".into()))?
            .clone();
        let n = params[ti].numel();
        let step = match opts.max_coords_per_tensor {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for c in (0..n).step_by(step) {
            let orig = params[ti].data()[c];
            let a = analytic.data()[c];
            let mut measure = |eps: f64| -> Result<(f64, f64)> {
                let mut at = |k: f64| -> Result<f64> {
                    work[ti].data_mut()[c] = orig + k * eps;
                    eval(&f, &work)
                };
                let numeric = if opts.fourth_order {
                    let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
                    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * eps)
                } else {
                    (at(1.0)? - at(-1.0)?) / (2.0 * eps)
                };
                work[ti].data_mut()[c] = orig;
                let denom = a.abs().max(numeric.abs()).max(opts.floor);
                Ok(((a - numeric).abs() / denom, numeric))
            };
            let (mut rel, mut numeric) = measure(opts.eps)?;
            if let Some(tol) = opts.refine_above {
                let mut eps = opts.eps;
                for _ in 0..opts.refine_steps {
                    if rel <= tol {
                        break;
                    }
                    eps /= 10.0;
                    let (r, n) = measure(eps)?;
                    if r < rel {
                        (rel, numeric) = (r, n);
                    }
                }
                if rel <= tol && eps < opts.eps {
                    report.refined += 1;
                }
            }
            report.coords_checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((ti, c, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
