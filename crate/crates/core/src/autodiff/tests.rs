use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::tensor::{self, ReduceKind};
use crate::testutil::rand_tensor;

/// Projects `y` onto fixed random weights so every output coordinate matters.
fn probe(t: &Tape, y: &Var, seed: u64) -> Result<Var> {
    let w = t.constant(rand_tensor(y.shape(), seed));
    let prod = t.mul(y, &w)?;
    t.sum_all(&prod)
}

fn check(f: impl Fn(&Tape, &[Var]) -> Result<Var>, params: &[Tensor]) -> f64 {
    let report = finite_difference_check(f, params, &GradCheckOptions::default()).unwrap();
    assert!(report.coords_checked > 0);
    report.max_rel_err
}

#[test]
fn square_of_three_has_slope_six() {
    let t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(&x, &x).unwrap();
    let g = t.backward(&y).unwrap();
    assert_eq!(g.get(&x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn relu_squared_slope() {
    let t = Tape::new();
    let x = t.leaf(Tensor::new([2], vec![-1.0, 4.0]).unwrap());
    let y = t.map(&x, Unary::Relu2).unwrap();
    let s = t.sum_all(&y).unwrap();
    let g = t.backward(&s).unwrap();
    assert_eq!(g.get(&x).unwrap().data(), &[0.0, 8.0]);
}

fn kink_objective(shift: f64) -> impl Fn(&Tape, &[Var]) -> Result<Var> {
    move |t, v| {
        let y = t.map(&v[0], Unary::Relu2)?;
        let y = t.sum_all(&y)?;
        // A wrong derivative: the extra term is invisible to reverse mode.
        let c = t.constant(Tensor::scalar(shift * v[0].value().item()?));
        t.add(&y, &c)
    }
}

#[test]
fn refinement_resolves_kinks_but_not_wrong_gradients() {
    // x sits 1.5 steps from the kink, so the five-point stencil crosses it.
    let x = [Tensor::scalar(1.5e-3)];
    let plain = GradCheckOptions::default();
    let refined = GradCheckOptions {
        refine_above: Some(1e-4),
        ..GradCheckOptions::default()
    };
    let raw = finite_difference_check(kink_objective(0.0), &x, &plain).unwrap();
    assert!(raw.max_rel_err > 1e-4, "{raw:?}");
    let fixed = finite_difference_check(kink_objective(0.0), &x, &refined).unwrap();
    assert!(fixed.max_rel_err < 1e-10, "{fixed:?}");
    assert_eq!(fixed.refined, 1);
    let wrong = finite_difference_check(kink_objective(1.0), &x, &refined).unwrap();
    assert!(wrong.max_rel_err > 0.1, "{wrong:?}");
    assert_eq!(wrong.refined, 0);
}

#[test]
fn fan_out_accumulates() {
    let t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let a = t.scale(&x, 3.0).unwrap();
    let b = t.mul(&x, &x).unwrap();
    let y = t.add(&a, &b).unwrap();
    let g = t.backward(&y).unwrap();
    assert_eq!(g.get(&x).unwrap().item().unwrap(), 3.0 + 4.0);
}

#[test]
fn unreached_leaf_gets_zeros_and_constants_get_none() {
    let t = Tape::new();
    let x = t.leaf(Tensor::ones([2]));
    let unused = t.leaf(Tensor::ones([3]));
    let c = t.constant(Tensor::ones([2]));
    let y = t.mul(&x, &c).unwrap();
    let s = t.sum_all(&y).unwrap();
    let g = t.backward(&s).unwrap();
    assert_eq!(g.get(&unused).unwrap().data(), &[0.0; 3]);
    assert!(g.get(&c).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let t = Tape::new();
    let x = t.leaf(Tensor::ones([2]));
    assert!(matches!(t.backward(&x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn inference_tape_records_nothing() {
    let t = Tape::inference();
    let x = t.leaf(Tensor::ones([2, 2]));
    let y = t.contract(&x, &x, "ij,jk->ik").unwrap();
    assert!(t.is_empty());
    assert_eq!(y.value().data(), &[2.0; 4]);
    assert!(!y.requires_grad());
}

#[test]
fn param_bound_twice_sums_gradients() {
    let t = Tape::new();
    let p = Tensor::scalar(1.5);
    let a = t.param(crate::ParamId(0), &p);
    let b = t.param(crate::ParamId(0), &p);
    let y = t.mul(&a, &b).unwrap();
    let g = t.backward(&y).unwrap();
    assert_eq!(g.param(crate::ParamId(0)).unwrap().item().unwrap(), 3.0);
}

#[test]
fn grad_check_binary_broadcast() {
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[4], 2);
    let pos = rand_tensor(&[3, 1], 3).map(|v| 1.5 + v);
    let err = check(
        |t, p| {
            let s = t.add(&p[0], &p[1])?;
            let m = t.mul(&s, &p[1])?;
            let d = t.div(&m, &p[2])?;
            let e = t.sub(&d, &p[0])?;
            probe(t, &e, 9)
        },
        &[a, b, pos],
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_every_unary() {
    let x = rand_tensor(&[10], 4).map(|v| 0.3 + v * 1.2);
    let pos = rand_tensor(&[10], 5).map(|v| 1.5 + v);
    let ops = [
        Unary::Neg,
        Unary::Scale(-1.7),
        Unary::Offset(0.4),
        Unary::Relu,
        Unary::Relu2,
        Unary::Silu,
        Unary::Gelu,
        Unary::Sigmoid,
        Unary::Exp,
        Unary::Square,
        Unary::Tanh,
    ];
    for op in ops {
        let err = check(|t, p| probe(t, &t.map(&p[0], op)?, 1), std::slice::from_ref(&x));
        assert!(err < 1e-5, "{op:?}: {err}");
    }
    for op in [Unary::Ln, Unary::Sqrt, Unary::Rsqrt] {
        let err = check(|t, p| probe(t, &t.map(&p[0], op)?, 1), std::slice::from_ref(&pos));
        assert!(err < 1e-5, "{op:?}: {err}");
    }
}

#[test]
fn grad_check_contractions() {
    let specs: &[(&str, &[usize], &[usize])] = &[
        ("ij,jk->ik", &[3, 4], &[4, 2]),
        ("bnd,bmd->bnm", &[2, 3, 4], &[2, 5, 4]),
        ("bgnk,bgne->bgke", &[1, 2, 3, 2], &[1, 2, 3, 4]),
        ("bhke,bgh->bgke", &[1, 3, 2, 2], &[1, 4, 3]),
        ("btk,bte->btke", &[1, 3, 2], &[1, 3, 2]),
    ];
    for (i, (spec, sa, sb)) in specs.iter().enumerate() {
        let a = rand_tensor(sa, 20 + i as u64);
        let b = rand_tensor(sb, 40 + i as u64);
        let err = check(
            |t, p| probe(t, &t.contract(&p[0], &p[1], spec)?, 7),
            &[a, b],
        );
        assert!(err < 1e-5, "{spec}: {err}");
    }
}

#[test]
fn grad_check_reductions_and_scans() {
    let x = rand_tensor(&[3, 4, 2], 6);
    for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
        for keep in [false, true] {
            let err = check(
                |t, p| probe(t, &t.reduce(&p[0], &[1], kind, keep)?, 2),
                std::slice::from_ref(&x),
            );
            assert!(err < 1e-5, "{kind:?} keep={keep}: {err}");
        }
    }
    for exclusive in [false, true] {
        let err = check(
            |t, p| probe(t, &t.cumsum(&p[0], 1, exclusive)?, 3),
            std::slice::from_ref(&x),
        );
        assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn grad_check_data_movement() {
    let x = rand_tensor(&[2, 3, 4], 7);
    let err = check(
        |t, p| {
            let r = t.reshape(&p[0], &[6, 4])?;
            let tr = t.transpose(&r, &[1, 0])?;
            let sl = t.slice(&tr, 1, 1, 4)?;
            let pd = t.pad(&sl, 0, 1, 2)?;
            let parts = t.split(&pd, 1, &[1, 3])?;
            let cat = t.concat(&[&parts[1], &parts[0]], 1)?;
            let tl = t.tile(&cat, 0, 2)?;
            probe(t, &tl, 4)
        },
        &[x],
    );
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_softmax_gather_rope() {
    let x = rand_tensor(&[2, 4, 4], 8);
    for causal in [false, true] {
        let err = check(|t, p| probe(t, &t.softmax(&p[0], causal)?, 5), std::slice::from_ref(&x));
        assert!(err < 1e-5, "{err}");
    }
    let table = rand_tensor(&[5, 3], 9);
    let err = check(
        |t, p| probe(t, &t.gather_rows(&p[0], &[4, 1, 4, 0])?, 6),
        &[table],
    );
    assert!(err < 1e-5, "{err}");
    let q = rand_tensor(&[2, 3, 2, 4], 10);
    let err = check(|t, p| probe(t, &t.rope(&p[0], &[1, 2], 3)?, 7), &[q]);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn grad_check_normalize_last() {
    let x = rand_tensor(&[3, 6], 12);
    for center in [false, true] {
        let err = check(
            |t, p| probe(t, &t.normalize_last(&p[0], 1e-5, center)?, 8),
            std::slice::from_ref(&x),
        );
        assert!(err < 1e-5, "center={center}: {err}");
    }
}

#[test]
fn grad_check_cross_entropy() {
    let logits = rand_tensor(&[4, 6], 11);
    let targets = [0, 5, 2, 2];
    let weights = [1.0, 0.0, 1.0, 1.0];
    let err = check(
        |t, p| t.cross_entropy(&p[0], &targets, Some(&weights)),
        std::slice::from_ref(&logits),
    );
    assert!(err < 1e-5, "{err}");
    let err = check(|t, p| t.cross_entropy(&p[0], &targets, None), &[logits]);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn cross_entropy_uniform_logits_is_log_v() {
    let t = Tape::new();
    let l = t.leaf(Tensor::zeros([3, 8]));
    let loss = t.cross_entropy(&l, &[0, 1, 7], None).unwrap();
    assert!((loss.value().item().unwrap() - libm::log(8.0)).abs() < 1e-14);
    let zero_weights = t.cross_entropy(&l, &[0, 1, 7], Some(&[0.0; 3]));
    assert!(zero_weights.is_err());
    assert!(t.cross_entropy(&l, &[8, 0, 0], None).is_err());
}

#[test]
fn rope_rotates_unit_vector() {
    let x = Tensor::new([3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let r = tensor::rope(&x, &[0], 1.0, 0).unwrap();
    for p in 0..3 {
        let (s, c) = libm::sincos(p as f64);
        assert!((r.at(&[p, 0]) - c).abs() < 1e-15);
        assert!((r.at(&[p, 1]) - s).abs() < 1e-15);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #[test]
    fn rope_inner_products_depend_on_offset_only(seed in 0u64..500, shift in 0usize..50) {
        let q = rand_tensor(&[1, 8], seed);
        let k = rand_tensor(&[1, 8], seed + 1);
        let at = |x: &Tensor, pos: usize| tensor::rope(x, &[0], 1.0, pos).unwrap().into_data();
        let base = dot(&at(&q, 7), &at(&k, 3));
        let moved = dot(&at(&q, 7 + shift), &at(&k, 3 + shift));
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn rope_inverse_round_trips(seed in 0u64..500, offset in 0usize..100) {
        let x = rand_tensor(&[2, 5, 6], seed);
        let r = tensor::rope(&x, &[1], 1.0, offset).unwrap();
        let back = tensor::rope(&r, &[1], -1.0, offset).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
        prop_assert!((r.norm() - x.norm()).abs() < 1e-10);
    }

    #[test]
    fn contract_gradient_is_linear_in_upstream(seed in 0u64..500) {
        let a = rand_tensor(&[3, 2], seed);
        let b = rand_tensor(&[2, 4], seed + 1);
        let grad_a = |w: f64| {
            let t = Tape::new();
            let va = t.leaf(a.clone());
            let vb = t.constant(b.clone());
            let y = t.contract(&va, &vb, "ij,jk->ik").unwrap();
            let s = t.sum_all(&t.scale(&y, w).unwrap()).unwrap();
            t.backward(&s).unwrap().get(&va).unwrap().clone()
        };
        let g1 = grad_a(1.0);
        let g3 = grad_a(3.0);
        prop_assert!(g1.scale(3.0).max_abs_diff(&g3).unwrap() < 1e-12);
        let expect: Vec<f64> = (0..3)
            .flat_map(|_| (0..2).map(|j| (0..4).map(|k| b.at(&[j, k])).sum::<f64>()))
            .collect();
        prop_assert!(g1.data().iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
