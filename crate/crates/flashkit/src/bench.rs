//! Training-step latency across context lengths and log-log slope fits.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{bail, ensure, Result};

use flashkit_core::autodiff::Tape;
use flashkit_core::data::Batcher;
use flashkit_core::model::{Model, ModelConfig, ModelKind};
use flashkit_core::params::Ctx;

use crate::corpus::SAMPLE;

pub const CSV_HEADER: &str = "kind,T,C,d,layers,batch,repeats,median_ms,p90_ms,precision";

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub d: usize,
    pub layers: usize,
    pub chunk: usize,
    /// Tokens per step; the batch is `tokens / T` (at least 1).
    pub tokens: usize,
    pub repeats: usize,
    /// Leading iterations discarded from the timings.
    pub warmup: usize,
    /// Time the forward pass only.
    pub forward_only: bool,
    /// Lengths whose estimated working set exceeds this are skipped.
    pub mem_budget_bytes: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            chunk: 64,
            tokens: 4096,
            repeats: 5,
            warmup: 2,
            forward_only: false,
            mem_budget_bytes: 4 << 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub kind: ModelKind,
    pub t: usize,
    pub c: usize,
    pub d: usize,
    pub layers: usize,
    pub batch: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub p90_ms: f64,
    pub precision: &'static str,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3},{:.3},{}",
            self.kind, self.t, self.c, self.d, self.layers, self.batch, self.repeats, self.median_ms, self.p90_ms, self.precision
        )
    }
}

/// A length that was not measured.
#[derive(Clone, Debug, PartialEq)]
pub struct Skipped {
    pub kind: ModelKind,
    pub t: usize,
    pub reason: String,
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Median and nearest-rank 90th percentile.
pub fn summarize(times_ms: &[f64]) -> (f64, f64) {
    let mut v = times_ms.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    let rank = (0.9 * n as f64).ceil() as usize;
    (median, v[rank.clamp(1, n) - 1])
}

/// The model configuration benchmarked for `kind` at length `t`.
pub fn bench_model(kind: ModelKind, t: usize, cfg: &BenchConfig) -> ModelConfig {
    let chunk = if kind == ModelKind::Flash { cfg.chunk } else { t };
    let mut m = ModelConfig::new(kind, cfg.d, cfg.layers, t, chunk);
    m.heads = (cfg.d / 64).max(1);
    m
}

/// Rough peak bytes of one training step: the retained `T x T` attention
/// maps or `[T, s, e]` prefix states dominate.
pub fn estimate_bytes(m: &ModelConfig, batch: usize) -> usize {
    let (t, d, e, s) = (m.context, m.d, m.e, m.s);
    let per_token = 8 * (2 * e + s + 6 * d + 2 * m.vocab);
    let attn = match m.kind {
        ModelKind::FlashQuad => 3 * t * t,
        ModelKind::Flash => 3 * m.chunk * t + (t / m.chunk) * s * e,
        ModelKind::LinearToken => 3 * t * s * e,
        ModelKind::TransformerPp | ModelKind::MhsaMlp => 3 * m.heads * t * t,
    };
    batch * m.layers * (t * per_token + 8 * attn)
}

/// Times training steps (or forward passes) for every length.
pub fn bench_latency(kind: ModelKind, lengths: &[usize], cfg: &BenchConfig) -> Result<(Vec<BenchRecord>, Vec<Skipped>)> {
    ensure!(cfg.repeats >= 1, "need at least one timed repeat");
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for &t in lengths {
        let batch = (cfg.tokens / t).max(1);
        let m = bench_model(kind, t, cfg);
        let skip = |reason: String| Skipped { kind, t, reason };
        if let Err(e) = m.validate() {
            skipped.push(skip(e.to_string()));
            continue;
        }
        let need = estimate_bytes(&m, batch);
        if need > cfg.mem_budget_bytes {
            skipped.push(skip(format!(
                "estimated {} MiB exceeds the {} MiB budget",
                need >> 20,
                cfg.mem_budget_bytes >> 20
            )));
            continue;
        }
        let model = Model::new(m.clone(), cfg.seed)?;
        let chunk = (kind == ModelKind::Flash).then_some(m.chunk);
        let batches = Batcher::new(SAMPLE.to_vec(), batch, t, chunk, cfg.seed)?;
        let mut times = Vec::with_capacity(cfg.repeats);
        for it in 0..cfg.warmup + cfg.repeats {
            let b = batches.batch(it as u64);
            let start = Instant::now();
            let tape = if cfg.forward_only { Tape::inference() } else { Tape::new() };
            let cx = Ctx::new(&tape, &model.store);
            let loss = model.lm_loss(&cx, &b.inputs, &b.targets, Some(&b.segments), b.batch)?;
            if !cfg.forward_only {
                tape.backward(&loss)?;
            }
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if it >= cfg.warmup {
                times.push(ms);
            }
        }
        let (median_ms, p90_ms) = summarize(&times);
        records.push(BenchRecord {
            kind,
            t,
            c: m.chunk,
            d: m.d,
            layers: m.layers,
            batch,
            repeats: times.len(),
            median_ms,
            p90_ms,
            precision: "f64",
        });
    }
    Ok((records, skipped))
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_exponent(points: &[(f64, f64)]) -> Result<Fit> {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        bail!("need at least 3 distinct lengths to fit an exponent, got {}", xs.len());
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        bail!("log-log fit needs positive values");
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = points.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(Fit { slope, intercept, r2 })
}

/// Slope of median per-step time against `T`.
pub fn fit_records(records: &[BenchRecord]) -> Result<Fit> {
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.t as f64, r.median_ms)).collect();
    fit_exponent(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        assert_eq!(summarize(&[5.0, 1.0, 3.0, 2.0, 4.0]), (3.0, 5.0));
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 4.0]), (2.5, 4.0));
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(summarize(&ten), (5.5, 9.0));
    }

    #[test]
    fn exact_power_laws() {
        let lin: Vec<(f64, f64)> = [256.0, 512.0, 1024.0, 2048.0].iter().map(|&t| (t, 3.0 * t)).collect();
        assert!((fit_exponent(&lin).unwrap().slope - 1.0).abs() < 1e-6);
        let quad: Vec<(f64, f64)> = [256.0, 512.0, 1024.0].iter().map(|&t| (t, 0.5 * t * t)).collect();
        let f = fit_exponent(&quad).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-6);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        assert!(fit_exponent(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
        assert!(fit_exponent(&[(1.0, 1.0), (1.0, 2.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn csv_shape() {
        let r = BenchRecord {
            kind: ModelKind::Flash,
            t: 256,
            c: 64,
            d: 64,
            layers: 2,
            batch: 16,
            repeats: 5,
            median_ms: 1.5,
            p90_ms: 2.25,
            precision: "f64",
        };
        assert_eq!(to_csv(&[r]), format!("{CSV_HEADER}\nflash,256,64,64,2,16,5,1.500,2.250,f64\n"));
    }

    #[test]
    fn small_run_records_every_length() {
        let cfg = BenchConfig {
            d: 16,
            chunk: 8,
            tokens: 64,
            repeats: 5,
            ..BenchConfig::default()
        };
        let (recs, skipped) = bench_latency(ModelKind::Flash, &[16, 32, 20], &cfg).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(skipped.len(), 1);
        assert!(skipped[0].reason.contains("divide"));
        for r in &recs {
            assert_eq!(r.repeats, 5);
            assert!(r.median_ms <= r.p90_ms);
            assert_eq!(r.batch * r.t, 64);
        }
        let tight = BenchConfig {
            mem_budget_bytes: 1,
            ..cfg
        };
        let (recs, skipped) = bench_latency(ModelKind::FlashQuad, &[16], &tight).unwrap();
        assert!(recs.is_empty() && skipped[0].reason.contains("budget"));
    }
}
