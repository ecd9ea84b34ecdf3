//! Training loop.
//!
//! Batches and masking randomness are functions of `(seed, step)`, so a run
//! resumed from saved parameters and optimizer state reproduces the trace of
//! an uninterrupted one.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{Batch, Batcher};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamW, OptimConfig};
use crate::params::Ctx;

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Objective {
    /// Next-byte prediction.
    #[default]
    Lm,
    /// Masked byte reconstruction.
    Mlm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub objective: Objective,
    pub batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Byte-level setup with the default optimizer; `total` and `warmup`
    /// steps are taken from `optim`.
    pub fn new(model: ModelConfig, batch: usize, seed: u64) -> Self {
        Self {
            model,
            optim: OptimConfig::default(),
            objective: Objective::Lm,
            batch,
            seed,
        }
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Loss before the update, in nats.
    pub loss: f64,
    pub lr: f64,
}

/// Owns the model, optimizer state and batch stream of a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    batches: Batcher,
}

/// Stream id separating masking randomness from batch sampling.
const MASK_STREAM: u64 = 1 << 62;

fn mask_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MASK_STREAM | step);
    rng
}

/// Loss of `model` on one batch under `objective`.
pub fn batch_loss(cx: &Ctx, model: &Model, batch: &Batch, objective: Objective, rng: &mut ChaCha8Rng) -> Result<crate::Var> {
    match objective {
        Objective::Lm => model.lm_loss(cx, &batch.inputs, &batch.targets, Some(&batch.segments), batch.batch),
        Objective::Mlm => model.mlm_loss(cx, &batch.inputs, Some(&batch.segments), batch.batch, rng),
    }
}

/// Mean loss over `batches` without recording gradients. Masking for batch
/// `i` is seeded by `(seed, i)`.
pub fn evaluate(model: &Model, batches: &[Batch], objective: Objective, seed: u64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Invalid("no evaluation batches".into()));
    }
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &model.store);
    let mut total = 0.0;
    for (i, b) in batches.iter().enumerate() {
        let loss = batch_loss(&cx, model, b, objective, &mut mask_rng(seed, i as u64))?;
        total += loss.value().item()?;
    }
    Ok(total / batches.len() as f64)
}

impl Trainer {
    /// Fresh model and optimizer over `corpus`.
    pub fn new(cfg: TrainConfig, corpus: Vec<u8>) -> Result<Self> {
        let model = Model::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(cfg.optim.clone(), model.store.values());
        Self::from_parts(cfg, model, opt, corpus)
    }

    /// Continues from restored parameters and optimizer state.
    pub fn from_parts(cfg: TrainConfig, model: Model, opt: AdamW, corpus: Vec<u8>) -> Result<Self> {
        if model.cfg != cfg.model {
            return Err(Error::Config("model does not match the training config".into()));
        }
        if opt.m.len() != model.store.len() {
            return Err(Error::Config("optimizer state does not match the model".into()));
        }
        let chunk = (cfg.model.kind == crate::model::ModelKind::Flash).then_some(cfg.model.chunk);
        let batches = Batcher::new(corpus, cfg.batch, cfg.model.context, chunk, cfg.seed)?;
        Ok(Self {
            cfg,
            model,
            opt,
            batches,
        })
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    pub fn batches(&self) -> &Batcher {
        &self.batches
    }

    /// Forward, backward and one optimizer update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.opt.step;
        let batch = self.batches.batch(step);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.model.store);
        let loss = batch_loss(&cx, &self.model, &batch, self.cfg.objective, &mut mask_rng(self.cfg.seed, step))?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(alloc::format!("loss {value} at step {step}")));
        }
        let grads = tape.backward(&loss)?;
        let shapes: Vec<&[usize]> = self.model.store.values().iter().map(|t| t.shape()).collect();
        let grads = grads.param_list(&shapes);
        let lr = self.opt.update(self.model.store.values_mut(), grads)?;
        Ok(StepRecord { step, loss: value, lr })
    }

    /// Runs `n` steps, calling `on_step` after each.
    pub fn run<E: From<Error>>(
        &mut self,
        n: u64,
        mut on_step: impl FnMut(&Self, &StepRecord) -> core::result::Result<(), E>,
    ) -> core::result::Result<Vec<StepRecord>, E> {
        let mut trace = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let rec = self.step()?;
            on_step(self, &rec)?;
            trace.push(rec);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;
    use crate::model::{ModelKind, BYTE_VOCAB};

    fn corpus() -> Vec<u8> {
        let text = b"the quick brown fox jumps over the lazy dog. ";
        let mut out = Vec::new();
        for i in 0..60 {
            out.extend_from_slice(text);
            if i % 7 == 6 {
                out.push(0);
            }
        }
        out
    }

    fn tiny(kind: ModelKind) -> TrainConfig {
        let mut m = ModelConfig::new(kind, 16, 2, 16, 4);
        m.heads = 2;
        let mut cfg = TrainConfig::new(m, 4, 7);
        cfg.optim.warmup = 5;
        cfg.optim.total = 50;
        cfg.optim.lr_peak = 1e-2;
        cfg
    }

    #[test]
    fn loss_decreases() {
        for kind in [ModelKind::Flash, ModelKind::FlashQuad, ModelKind::TransformerPp] {
            let mut tr = Trainer::new(tiny(kind), corpus()).unwrap();
            let trace = tr.run(50, |_, _| Ok::<_, Error>(())).unwrap();
            let head: f64 = trace[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
            let tail: f64 = trace[45..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
            assert!(tail < head, "{kind}: {head} -> {tail}");
            assert_eq!(trace[0].lr, 0.0);
            assert_eq!(trace[5].lr, 1e-2);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let run = || Trainer::new(tiny(ModelKind::Flash), corpus()).unwrap().run(6, |_, _| Ok::<_, Error>(())).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_continues_the_trace() {
        let full = Trainer::new(tiny(ModelKind::Flash), corpus()).unwrap().run(8, |_, _| Ok::<_, Error>(())).unwrap();
        let mut first = Trainer::new(tiny(ModelKind::Flash), corpus()).unwrap();
        first.run(3, |_, _| Ok::<_, Error>(())).unwrap();
        let (model, opt) = (first.model.clone(), first.opt.clone());
        let mut resumed = Trainer::from_parts(tiny(ModelKind::Flash), model, opt, corpus()).unwrap();
        let rest = resumed.run(5, |_, _| Ok::<_, Error>(())).unwrap();
        assert_eq!(&full[3..], &rest[..]);
    }

    #[test]
    fn mlm_training_runs() {
        let mut cfg = tiny(ModelKind::Flash);
        cfg.model.causal = false;
        cfg.model.vocab = BYTE_VOCAB + 1;
        cfg.objective = Objective::Mlm;
        let mut tr = Trainer::new(cfg, corpus()).unwrap();
        let trace = tr.run(3, |_, _| Ok::<_, Error>(())).unwrap();
        assert!((trace[0].loss - 257f64.ln()).abs() < 0.1);
        let batches = vec![tr.batches().batch(100)];
        let a = evaluate(&tr.model, &batches, Objective::Mlm, 1).unwrap();
        assert_eq!(a, evaluate(&tr.model, &batches, Objective::Mlm, 1).unwrap());
    }

    #[test]
    fn mismatched_parts_are_rejected() {
        let tr = Trainer::new(tiny(ModelKind::Flash), corpus()).unwrap();
        let other = tiny(ModelKind::FlashQuad);
        assert!(Trainer::from_parts(other, tr.model.clone(), tr.opt.clone(), corpus()).is_err());
    }
}
