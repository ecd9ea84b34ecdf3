//! Batching, training and streaming decode through the public API.

use flashkit_core::data::{Batcher, DOC_DELIMITER};
use flashkit_core::decode::{chunk_cache_footprint, Decoder};
use flashkit_core::model::{ModelConfig, ModelKind};
use flashkit_core::params::Ctx;
use flashkit_core::train::{TrainConfig, Trainer};
use flashkit_core::Tape;

fn corpus() -> Vec<u8> {
    let mut bytes = Vec::new();
    for i in 0..60 {
        bytes.extend_from_slice(format!("document {i} says the cat sat on the mat").as_bytes());
        bytes.push(DOC_DELIMITER);
    }
    bytes
}

#[test]
fn undelimited_corpus_has_one_segment() {
    let b = Batcher::new(b"abcdefghijklmnopqrstuvwxyz".repeat(4), 3, 16, Some(4), 1).unwrap();
    for step in 0..5 {
        assert!(b.batch(step).segments.iter().all(|&s| s == 0));
    }
}

#[test]
fn delimiter_splits_a_row() {
    let mut bytes = vec![b'x'; 40];
    bytes[10] = DOC_DELIMITER;
    let b = Batcher::new(bytes, 1, 16, Some(8), 0).unwrap();
    let w = b.windows(&[4]);
    // offsets 4..=10 belong to the first document, 11.. to the second
    let expected: Vec<u32> = (4..20).map(|p| u32::from(p > 10)).collect();
    assert_eq!(w.segments, expected);
}

#[test]
fn same_seed_same_stream() {
    let a = Batcher::new(corpus(), 2, 32, Some(8), 9).unwrap();
    let b = Batcher::new(corpus(), 2, 32, Some(8), 9).unwrap();
    let c = Batcher::new(corpus(), 2, 32, Some(8), 10).unwrap();
    let first: Vec<_> = a.iter().take(5).collect();
    assert_eq!(first, b.iter().take(5).collect::<Vec<_>>());
    assert_ne!(first, c.iter().take(5).collect::<Vec<_>>());
}

#[test]
fn chunk_must_divide_length() {
    assert!(Batcher::new(corpus(), 2, 30, Some(8), 0).is_err());
}

#[test]
fn trained_model_decodes_like_the_parallel_forward() {
    let mut model = ModelConfig::new(ModelKind::Flash, 16, 2, 64, 16);
    model.s = 8;
    let mut tr = Trainer::new(TrainConfig::new(model, 2, 5), corpus()).unwrap();
    let first = tr.step().unwrap().loss;
    for _ in 0..30 {
        tr.step().unwrap();
    }
    let last = tr.step().unwrap().loss;
    assert!(last < first, "{first} -> {last}");

    let prompt: Vec<u32> = b"document 7 says the cat sat on the mat"[..32].iter().map(|&b| u32::from(b)).collect();
    let dec = Decoder::new(&tr.model).unwrap();
    let mut cache = dec.init_cache();
    let mut stepped = Vec::new();
    for &t in &prompt {
        stepped.push(dec.step(&mut cache, t).unwrap());
    }
    assert_eq!(cache.footprint(), chunk_cache_footprint(2, 8, 32, 16));

    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &tr.model.store);
    let parallel = tr.model.logits(&cx, &prompt, None, 1).unwrap();
    let v = parallel.value();
    let vocab = stepped[0].numel();
    for (p, row) in stepped.iter().enumerate() {
        let want = &v.data()[p * vocab..(p + 1) * vocab];
        let err = row.data().iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "position {p}: {err}");
    }

    let out = dec.generate(&prompt, 8).unwrap();
    assert_eq!(out.len(), 8);
    assert_eq!(out, dec.generate(&prompt, 8).unwrap());
}
