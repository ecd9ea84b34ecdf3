use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::model::ModelConfig;
use crate::testutil::rand_tensor;

fn model(kind: ModelKind, len: usize, chunk: usize, seed: u64) -> Model {
    model_with(kind, len, chunk, seed, Kernel::Relu2, Aggregation::Mean)
}

fn model_with(kind: ModelKind, len: usize, chunk: usize, seed: u64, kernel: Kernel, agg: Aggregation) -> Model {
    let mut cfg = ModelConfig::new(kind, 16, 2, len, chunk);
    cfg.s = 8;
    cfg.kernel = kernel;
    cfg.aggregation = agg;
    let mut m = Model::new(cfg, seed).unwrap();
    // push weights away from the near-zero init so every path contributes
    for (i, v) in m.store.values_mut().iter_mut().enumerate() {
        *v = v.add(&rand_tensor(v.shape(), seed * 1000 + i as u64).scale(0.2)).unwrap();
    }
    m
}

fn bytes(n: usize, seed: u64) -> Vec<u32> {
    rand_tensor(&[n], seed).data().iter().map(|x| ((x + 1.0) * 127.9) as u32).collect()
}

/// Largest per-position `max|a - b| / max|b|`.
fn streaming_error(m: &Model, toks: &[u32]) -> f64 {
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &m.store);
    let parallel = m.logits(&cx, toks, None, 1).unwrap();
    let v = m.cfg.vocab;
    let dec = Decoder::new(m).unwrap();
    let mut cache = dec.init_cache();
    let mut worst: f64 = 0.0;
    for (p, &tok) in toks.iter().enumerate() {
        let got = dec.step(&mut cache, tok).unwrap();
        let want = &parallel.value().data()[p * v..(p + 1) * v];
        let scale = want.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let diff = got.data().iter().zip(want).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

#[test]
fn streaming_matches_parallel_flash() {
    let m = model(ModelKind::Flash, 128, 32, 1);
    let err = streaming_error(&m, &bytes(128, 2));
    assert!(err <= 1e-5, "{err:e}");
}

#[test]
fn streaming_matches_parallel_quadratic() {
    let m = model(ModelKind::FlashQuad, 64, 64, 3);
    let err = streaming_error(&m, &bytes(64, 4));
    assert!(err <= 1e-5, "{err:e}");
}

#[test]
fn streaming_matches_parallel_for_variants() {
    for (kernel, agg) in [
        (Kernel::Softmax, Aggregation::Mean),
        (Kernel::Relu2, Aggregation::Sum),
    ] {
        let m = model_with(ModelKind::Flash, 32, 8, 5, kernel, agg);
        assert!(streaming_error(&m, &bytes(32, 6)) <= 1e-5, "{kernel:?} {agg:?}");
        let q = model_with(ModelKind::FlashQuad, 16, 16, 7, kernel, agg);
        assert!(streaming_error(&q, &bytes(16, 8)) <= 1e-5, "{kernel:?}");
    }
}

#[test]
fn fresh_cache_is_zeroed() {
    let m = model(ModelKind::Flash, 64, 16, 0);
    let dec = Decoder::new(&m).unwrap();
    let cache = dec.init_cache();
    assert_eq!(cache, dec.init_cache());
    assert_eq!(cache.position, 0);
    for layer in &cache.layers {
        let LayerCache::Chunked(c) = layer else { panic!("expected chunk cache") };
        assert!(c.aggregate.data().iter().all(|&x| x == 0.0));
        assert_eq!((c.folded, c.filled), (0, 0));
    }
    assert_eq!(cache.footprint(), chunk_cache_footprint(2, 8, 32, 16));
}

#[test]
fn first_chunk_has_no_linear_part() {
    let m = model(ModelKind::Flash, 64, 16, 2);
    let dec = Decoder::new(&m).unwrap();
    let mut cache = dec.init_cache();
    for &tok in &bytes(15, 1) {
        dec.step(&mut cache, tok).unwrap();
        for layer in &cache.layers {
            let LayerCache::Chunked(c) = layer else { unreachable!() };
            assert!(c.aggregate.data().iter().all(|&x| x == 0.0));
        }
    }
    dec.step(&mut cache, 1).unwrap();
    let LayerCache::Chunked(c) = &cache.layers[0] else { unreachable!() };
    assert_eq!((c.folded, c.filled), (1, 0));
    assert!(c.aggregate.data().iter().any(|&x| x != 0.0));
}

#[test]
fn chunk_cache_size_is_constant() {
    let chunk = 8;
    let m = model(ModelKind::Flash, 10 * chunk, chunk, 3);
    let dec = Decoder::new(&m).unwrap();
    let mut cache = dec.init_cache();
    let toks = bytes(10 * chunk, 9);
    let mut sizes = Vec::new();
    for (p, &tok) in toks.iter().enumerate() {
        dec.step(&mut cache, tok).unwrap();
        if p + 1 == 2 * chunk || p + 1 == 10 * chunk {
            sizes.push(cache.footprint());
        }
    }
    assert_eq!(sizes[0], sizes[1]);
    assert_eq!(sizes[0], chunk_cache_footprint(2, 8, 32, chunk));
}

#[test]
fn full_cache_grows_with_history() {
    let m = model(ModelKind::FlashQuad, 16, 16, 4);
    let dec = Decoder::new(&m).unwrap();
    let mut cache = dec.init_cache();
    for &tok in &bytes(5, 3) {
        dec.step(&mut cache, tok).unwrap();
    }
    assert_eq!(cache.footprint(), 2 * 5 * (8 + 32));
}

#[test]
fn running_mean_equals_batch_mean() {
    let (s, e, chunk, n) = (3, 4, 5, 9);
    let mut c = ChunkCache::new(s, e, chunk);
    let mut total = alloc::vec![0.0; s * e];
    for g in 0..n {
        c.lin_k = rand_tensor(&[chunk, s], 10 + g);
        c.values = rand_tensor(&[chunk, e], 50 + g);
        let summary = chunk_summary(&c.lin_k, &c.values, s, e, chunk, Aggregation::Mean);
        total.iter_mut().zip(&summary).for_each(|(t, x)| *t += x);
        c.fold(Aggregation::Mean);
    }
    for (a, t) in c.aggregate.data().iter().zip(&total) {
        assert!((a - t / n as f64).abs() <= 1e-10);
    }
}

#[test]
fn rejects_unsupported_models_and_overflow() {
    let mut cfg = ModelConfig::new(ModelKind::Flash, 8, 1, 8, 4);
    cfg.causal = false;
    assert!(Decoder::new(&Model::new(cfg, 0).unwrap()).is_err());
    let mut cfg = ModelConfig::new(ModelKind::MhsaMlp, 8, 2, 8, 4);
    cfg.heads = 2;
    assert!(Decoder::new(&Model::new(cfg, 0).unwrap()).is_err());

    let m = model(ModelKind::Flash, 8, 4, 0);
    let dec = Decoder::new(&m).unwrap();
    let mut cache = dec.init_cache();
    for _ in 0..8 {
        dec.step(&mut cache, 1).unwrap();
    }
    assert!(dec.step(&mut cache, 1).is_err());
    assert!(dec.step(&mut dec.init_cache(), 300).is_err());
}

#[test]
fn generation_is_deterministic_and_greedy() {
    let m = model(ModelKind::Flash, 32, 8, 6);
    let dec = Decoder::new(&m).unwrap();
    let prompt = bytes(10, 2);
    let a = dec.generate(&prompt, 12).unwrap();
    assert_eq!(a, dec.generate(&prompt, 12).unwrap());
    assert_eq!(a.len(), 12);
    let mut cache = dec.init_cache();
    let mut logits = Tensor::zeros([0]);
    for &tok in &prompt {
        logits = dec.step(&mut cache, tok).unwrap();
    }
    assert_eq!(a[0], greedy(&logits));
    assert_eq!(greedy(&Tensor::new([3], alloc::vec![1.0, 3.0, 3.0]).unwrap()), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn streaming_matches_parallel_any_prefix(seed in 0u64..500, len in 1usize..24) {
        let m = model(ModelKind::Flash, 24, 4, seed);
        let toks = bytes(24, seed + 1);
        // decode a prefix and compare with the parallel pass over the full row
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &m.store);
        let parallel = m.logits(&cx, &toks, None, 1).unwrap();
        let dec = Decoder::new(&m).unwrap();
        let mut cache = dec.init_cache();
        let mut last = Tensor::zeros([0]);
        for &tok in &toks[..len] {
            last = dec.step(&mut cache, tok).unwrap();
        }
        let v = m.cfg.vocab;
        let want = &parallel.value().data()[(len - 1) * v..len * v];
        let diff = last.data().iter().zip(want).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        prop_assert!(diff <= 1e-9, "{}", diff);
    }
}
