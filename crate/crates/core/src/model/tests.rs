use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference_check, GradCheckOptions, Tape};
use crate::testutil::{assert_close, rand_tensor};

fn small(kind: ModelKind) -> ModelConfig {
    let mut cfg = ModelConfig::new(kind, 8, 2, 8, 4);
    cfg.heads = 2;
    cfg
}

fn tokens(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..256)).collect()
}

fn logits(model: &Model, toks: &[u32], batch: usize) -> Tensor {
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &model.store);
    model.logits(&cx, toks, None, batch).unwrap().value().clone()
}

#[test]
fn closed_form_param_count_matches_store() {
    for kind in ModelKind::ALL {
        for tied in [true, false] {
            for norm in [NormKind::Layer, NormKind::Scale] {
                let mut cfg = ModelConfig::new(kind, 16, 4, 32, 8);
                cfg.tied = tied;
                cfg.norm = norm;
                let model = Model::new(cfg.clone(), 0).unwrap();
                assert_eq!(model.store.count(), cfg.param_count(), "{kind} tied={tied} {norm:?}");
            }
        }
    }
    // the factorized bias path kicks in at long contexts
    let cfg = ModelConfig::new(ModelKind::FlashQuad, 8, 1, 600, 8);
    assert_eq!(Model::new(cfg.clone(), 0).unwrap().store.count(), cfg.param_count());
}

#[test]
fn kind_names_round_trip() {
    for kind in ModelKind::ALL {
        assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
    }
    assert!("flash-quad".parse::<ModelKind>().is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small(ModelKind::Flash);
    cfg.chunk = 3;
    assert!(matches!(Model::new(cfg, 0), Err(Error::Config(_))));
    let mut cfg = small(ModelKind::TransformerPp);
    cfg.layers = 3;
    assert!(Model::new(cfg, 0).is_err());
    let mut cfg = small(ModelKind::MhsaMlp);
    cfg.heads = 3;
    assert!(Model::new(cfg, 0).is_err());
    let mut cfg = small(ModelKind::Flash);
    cfg.d = 7;
    assert!(Model::new(cfg, 0).is_err());
}

#[test]
fn flash_with_one_chunk_equals_quadratic_model() {
    let quad = Model::new(small(ModelKind::FlashQuad), 5).unwrap();
    let mut cfg = small(ModelKind::Flash);
    cfg.chunk = cfg.context;
    let flash = Model::new(cfg, 5).unwrap();
    let toks = tokens(16, 1);
    assert_close(&logits(&quad, &toks, 2), &logits(&flash, &toks, 2), 1e-6);
}

#[test]
fn same_seed_same_model() {
    for kind in ModelKind::ALL {
        let a = Model::new(small(kind), 9).unwrap();
        let b = Model::new(small(kind), 9).unwrap();
        let c = Model::new(small(kind), 10).unwrap();
        assert_eq!(snapshot(&a.store), snapshot(&b.store));
        assert_ne!(snapshot(&a.store), snapshot(&c.store));
        let toks = tokens(8, 2);
        assert_eq!(logits(&a, &toks, 1), logits(&b, &toks, 1));
    }
}

#[test]
fn zero_embeddings_give_uniform_loss() {
    for kind in ModelKind::ALL {
        let mut model = Model::new(small(kind), 1).unwrap();
        let id = model.embed;
        *model.store.get_mut(id) = Tensor::zeros(model.store.get(id).shape().to_vec());
        let toks = tokens(16, 3);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &model.store);
        let loss = model.lm_loss(&cx, &toks[..8], &toks[8..], None, 1).unwrap();
        let want = (BYTE_VOCAB as f64).ln();
        assert!((loss.value().item().unwrap() - want).abs() < 1e-12, "{kind}");
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    for kind in ModelKind::ALL {
        let model = Model::new(small(kind), 2).unwrap();
        let toks = tokens(17, 4);
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &model.store);
        let loss = model.lm_loss(&cx, &toks[..16], &toks[1..], None, 2).unwrap();
        let l = loss.value().item().unwrap();
        assert!((l - 256f64.ln()).abs() < 0.1, "{kind}: {l}");
    }
}

#[test]
fn batch_rows_are_independent() {
    for kind in ModelKind::ALL {
        let model = Model::new(small(kind), 3).unwrap();
        let (a, b) = (tokens(8, 5), tokens(8, 6));
        let ab = logits(&model, &[a.clone(), b.clone()].concat(), 2);
        let ba = logits(&model, &[b, a].concat(), 2);
        let v = model.cfg.vocab;
        assert_eq!(&ab.data()[..8 * v], &ba.data()[8 * v..], "{kind}");
    }
}

#[test]
fn causal_models_ignore_future_tokens() {
    for kind in ModelKind::ALL {
        let model = Model::new(small(kind), 4).unwrap();
        let base = tokens(8, 7);
        let y = logits(&model, &base, 1);
        let mut changed = base.clone();
        changed[5] = (changed[5] + 1) % 256;
        let y2 = logits(&model, &changed, 1);
        let v = model.cfg.vocab;
        let d = |lo: usize, hi: usize| {
            y.data()[lo * v..hi * v]
                .iter()
                .zip(&y2.data()[lo * v..hi * v])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        };
        assert_eq!(d(0, 5), 0.0, "{kind} leaked the future");
        assert!(d(5, 8) > 0.0, "{kind}");
    }
}

#[test]
fn segment_ids_only_affect_flash() {
    let mut cfg = small(ModelKind::Flash);
    cfg.chunk = 2;
    let model = Model::new(cfg, 6).unwrap();
    let toks = tokens(8, 8);
    let segs = [0, 0, 0, 0, 1, 1, 1, 1];
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &model.store);
    let with = model.logits(&cx, &toks, Some(&segs), 1).unwrap();
    let without = model.logits(&cx, &toks, None, 1).unwrap();
    assert!(with.value().max_abs_diff(without.value()).unwrap() > 0.0);
    assert!(model.logits(&cx, &toks, Some(&segs[..4]), 1).is_err());
}

#[test]
fn quadratic_model_rejects_other_lengths() {
    let model = Model::new(small(ModelKind::FlashQuad), 0).unwrap();
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &model.store);
    assert!(model.logits(&cx, &tokens(4, 0), None, 1).is_err());
}

#[test]
fn untied_head_is_used() {
    let mut cfg = small(ModelKind::Flash);
    cfg.tied = false;
    let mut model = Model::new(cfg, 1).unwrap();
    let head = model.head.unwrap();
    *model.store.get_mut(head) = Tensor::zeros(vec![8, 256]);
    let y = logits(&model, &tokens(8, 1), 1);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

fn model_grad_err(model: &Model, loss: impl Fn(&Model, &Ctx) -> Result<Var>) -> f64 {
    let opts = GradCheckOptions {
        max_coords_per_tensor: Some(24),
        refine_above: Some(1e-4),
        ..GradCheckOptions::default()
    };
    finite_difference_check(
        |tape, vars| loss(model, &Ctx::from_vars(tape, vars.to_vec())),
        model.store.values(),
        &opts,
    )
    .unwrap()
    .max_rel_err
}

fn jittered(cfg: ModelConfig, seed: u64) -> Model {
    let mut model = Model::new(cfg, seed).unwrap();
    for (i, v) in model.store.values_mut().iter_mut().enumerate() {
        *v = v.add(&rand_tensor(v.shape(), seed * 100 + i as u64).scale(0.3)).unwrap();
    }
    model
}

#[test]
fn end_to_end_gradients() {
    for kind in ModelKind::ALL {
        let mut cfg = small(kind);
        if kind == ModelKind::Flash {
            cfg.chunk = 2;
        }
        let model = jittered(cfg, 11);
        let toks = tokens(17, 12);
        let segs = [0, 0, 0, 0, 0, 1, 1, 1];
        let err = model_grad_err(&model, |m, cx| m.lm_loss(cx, &toks[..8], &toks[1..9], Some(&segs), 1));
        assert!(err < 1e-4, "{kind}: {err:e}");
    }
}

#[test]
fn mlm_gradients() {
    let mut cfg = small(ModelKind::Flash);
    cfg.causal = false;
    cfg.vocab = BYTE_VOCAB + 1;
    let model = jittered(cfg, 13);
    let toks = tokens(8, 14);
    let err = model_grad_err(&model, |m, cx| {
        m.mlm_loss(cx, &toks, None, 1, &mut ChaCha8Rng::seed_from_u64(1))
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn loss_objective_matches_model_mode() {
    let causal = Model::new(small(ModelKind::Flash), 0).unwrap();
    let mut cfg = small(ModelKind::Flash);
    cfg.causal = false;
    let bidir_small_vocab = Model::new(cfg.clone(), 0).unwrap();
    cfg.vocab = BYTE_VOCAB + 1;
    let bidir = Model::new(cfg, 0).unwrap();
    let toks = tokens(8, 0);
    let tape = Tape::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cx = Ctx::new(&tape, &causal.store);
    assert!(causal.mlm_loss(&cx, &toks, None, 1, &mut rng).is_err());
    let cx = Ctx::new(&tape, &bidir.store);
    assert!(bidir.lm_loss(&cx, &toks, &toks, None, 1).is_err());
    assert!(bidir.mlm_loss(&cx, &toks, None, 1, &mut rng).is_ok());
    let cx = Ctx::new(&tape, &bidir_small_vocab.store);
    assert!(bidir_small_vocab.mlm_loss(&cx, &toks, None, 1, &mut rng).is_err());
}

#[test]
fn mlm_masking_rates() {
    let toks = tokens(200_000, 15);
    let m = mlm_mask(&toks, &mut ChaCha8Rng::seed_from_u64(2));
    let n = toks.len() as f64;
    let selected: Vec<usize> = (0..toks.len()).filter(|&i| m.weights[i] == 1.0).collect();
    let rate = selected.len() as f64 / n;
    assert!((rate - 0.15).abs() < 0.01, "{rate}");
    let k = selected.len() as f64;
    let masked = selected.iter().filter(|&&i| m.inputs[i] == MASK_ID).count() as f64 / k;
    let kept = selected.iter().filter(|&&i| m.inputs[i] == toks[i]).count() as f64 / k;
    assert!((masked - 0.8).abs() < 0.01, "{masked}");
    // random replacements land on the original byte 1/256 of the time
    assert!((kept - (0.1 + 0.1 / 256.0)).abs() < 0.01, "{kept}");
    for i in 0..toks.len() {
        if m.weights[i] == 0.0 {
            assert_eq!(m.inputs[i], toks[i]);
        }
    }
}

#[test]
fn mlm_mask_never_empty() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let m = mlm_mask(&[1, 2], &mut rng);
        assert!(m.weights.contains(&1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flash_logits_are_finite_for_any_bytes(seed in 0u64..1000, chunk in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let mut cfg = small(ModelKind::Flash);
        cfg.chunk = chunk;
        let model = Model::new(cfg, seed).unwrap();
        let y = logits(&model, &tokens(16, seed), 2);
        prop_assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn lm_loss_matches_per_position_oracle() {
    let model = jittered(small(ModelKind::Flash), 21);
    let toks = tokens(17, 22);
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &model.store);
    let (inputs, targets) = (&toks[..16], &toks[1..]);
    let loss = model.lm_loss(&cx, inputs, targets, None, 2).unwrap().value().item().unwrap();
    let y = model.logits(&cx, inputs, None, 2).unwrap();
    let v = model.cfg.vocab;
    let mut total = 0.0;
    for p in 0..16 {
        let row = &y.value().data()[p * v..(p + 1) * v];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[p] as usize];
    }
    assert!((loss - total / 16.0).abs() < 1e-12);
}

#[test]
fn confident_logits_give_near_zero_loss() {
    let tape = Tape::inference();
    let logits = Tensor::from_fn([3, 256], |i| if i[1] == i[0] + 10 { 60.0 } else { 0.0 });
    let loss = tape.cross_entropy(&tape.constant(logits), &[10, 11, 12], None).unwrap();
    assert!(loss.value().item().unwrap() < 1e-20);
}

#[test]
fn batch_order_does_not_change_mean_loss() {
    let model = jittered(small(ModelKind::Flash), 23);
    let rows: Vec<Vec<u32>> = (0..3).map(|r| tokens(9, 30 + r)).collect();
    let loss = |order: &[usize]| {
        let inputs: Vec<u32> = order.iter().flat_map(|&r| rows[r][..8].to_vec()).collect();
        let targets: Vec<u32> = order.iter().flat_map(|&r| rows[r][1..].to_vec()).collect();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &model.store);
        model.lm_loss(&cx, &inputs, &targets, None, 3).unwrap().value().item().unwrap()
    };
    let base = loss(&[0, 1, 2]);
    for order in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
        assert!((loss(&order) - base).abs() <= 1e-10);
    }
}

#[test]
fn mlm_uniform_logits_and_unmasked_positions() {
    let mut cfg = small(ModelKind::Flash);
    cfg.causal = false;
    cfg.vocab = BYTE_VOCAB + 1;
    let mut model = Model::new(cfg, 2).unwrap();
    let toks = tokens(16, 4);
    let tape = Tape::inference();
    {
        let cx = Ctx::new(&tape, &model.store);
        // the loss only reads masked positions: changing unmasked targets is invisible
        let masked = mlm_mask(&toks, &mut ChaCha8Rng::seed_from_u64(5));
        let y = model.logits(&cx, &masked.inputs, None, 2).unwrap();
        let flat = tape.reshape(&y, &[16, 257]).unwrap();
        let mut other: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
        let base = tape.cross_entropy(&flat, &other, Some(&masked.weights)).unwrap().value().item().unwrap();
        for (i, w) in masked.weights.iter().enumerate() {
            if *w == 0.0 {
                other[i] = (other[i] + 1) % 256;
            }
        }
        let moved = tape.cross_entropy(&flat, &other, Some(&masked.weights)).unwrap().value().item().unwrap();
        assert_eq!(base, moved);
    }
    let id = model.embed;
    *model.store.get_mut(id) = Tensor::zeros([257, 8]);
    let cx = Ctx::new(&tape, &model.store);
    let loss = model.mlm_loss(&cx, &toks, None, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert!((loss.value().item().unwrap() - 257f64.ln()).abs() < 1e-12);
}
