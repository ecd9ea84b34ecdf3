//! Command-line interface.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flashkit_core::decode::{greedy, Decoder};
use flashkit_core::model::ModelKind;
use flashkit_core::train::Trainer;

use crate::bench::{bench_latency, fit_records, to_csv, BenchConfig};
use crate::checkpoint;
use crate::config::Settings;
use crate::corpus::load_or_sample;
use crate::verify::{run_criterion, SuiteConfig, ALL, FAST};

/// Environment variable capping worker threads (default 1).
pub const THREADS_ENV: &str = "FLASHKIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "flashkit", version, about = "Gated attention unit language models on CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a byte-level model.
    Train(TrainArgs),
    /// Time training steps across context lengths and write CSV.
    Bench(BenchArgs),
    /// Greedy generation from a checkpoint.
    Decode(DecodeArgs),
    /// Run the invariant and oracle suite.
    Verify(VerifyArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON settings; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus file (raw bytes, 0x00 between documents); default is the bundled sample.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub kernel: Option<String>,
    #[arg(long)]
    pub norm: Option<String>,
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write a checkpoint here at the end (and every --checkpoint-every steps).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; its settings are used.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    /// Write `step,loss,lr` rows here.
    #[arg(long)]
    pub trace_csv: Option<PathBuf>,
    /// Print every n-th step.
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated model kinds.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["flash".to_string(), "flash_quad".to_string(), "linear_token".to_string()])]
    pub kinds: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![256usize, 512, 1024, 2048, 4096])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub chunk: usize,
    /// Tokens per step; the batch shrinks as T grows.
    #[arg(long, default_value_t = 4096)]
    pub tokens: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long)]
    pub forward_only: bool,
    #[arg(long, default_value_t = 4096)]
    pub mem_budget_mb: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw prompt bytes.
    #[arg(long)]
    pub prompt_file: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub max_new_tokens: usize,
    /// Greedy argmax decoding (the only supported mode).
    #[arg(long, default_value_t = true)]
    pub greedy: bool,
    /// Write `position,token,step_us` rows here.
    #[arg(long)]
    pub timing_csv: Option<PathBuf>,
    /// Accepted for uniformity; greedy decoding draws no randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Include the slow benchmark and training criteria.
    #[arg(long)]
    pub full: bool,
    /// Comma-separated criterion numbers.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<u8>,
    /// Training steps for the trainability criterion.
    #[arg(long, default_value_t = 2000)]
    pub train_steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Reads [`THREADS_ENV`] and forwards it to the GEMM backend.
pub fn configure_threads() -> usize {
    let n = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1);
    // set before the first matrix product reads it
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    n
}

pub fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => train(a).map(|_| ExitCode::SUCCESS),
        Command::Bench(a) => bench(a).map(|_| ExitCode::SUCCESS),
        Command::Decode(a) => decode(a).map(|_| ExitCode::SUCCESS),
        Command::Verify(a) => verify(a),
    }
}

/// JSON settings (or defaults) overridden by any flags given.
pub fn resolve_settings(a: &TrainArgs) -> Result<Settings> {
    let mut s = match &a.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    macro_rules! flag {
        ($($f:ident),*) => {$( if let Some(v) = &a.$f { s.$f = v.clone(); } )*};
    }
    flag!(kind, d, layers, chunk, context, kernel, norm, objective, batch, steps, warmup, lr, seed);
    if a.corpus.is_some() {
        s.corpus = a.corpus.clone();
    }
    Ok(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let (settings, mut trainer) = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            let mut settings = ck.settings;
            if let Some(steps) = a.steps {
                settings.steps = steps;
            }
            let corpus = load_or_sample(a.corpus.as_deref().or(settings.corpus.as_deref()))?;
            let cfg = settings.train_config()?;
            let mut opt = ck.opt;
            opt.cfg.total = cfg.optim.total;
            (settings, Trainer::from_parts(cfg, ck.model, opt, corpus)?)
        }
        None => {
            let settings = resolve_settings(&a)?;
            let corpus = load_or_sample(settings.corpus.as_deref())?;
            let cfg = settings.train_config()?;
            (settings.clone(), Trainer::new(cfg, corpus)?)
        }
    };
    let done = trainer.step_count();
    let remaining = settings.steps.saturating_sub(done);
    eprintln!(
        "training {} (d={}, layers={}, T={}, {} params) for {remaining} steps from step {done}",
        settings.kind,
        settings.d,
        settings.layers,
        settings.context,
        trainer.model.store.count()
    );
    let mut trace = match &a.trace_csv {
        Some(p) => {
            let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            writeln!(f, "step,loss,lr")?;
            Some(f)
        }
        None => None,
    };
    let mut last = None;
    let every = a.checkpoint_every.filter(|&n| n > 0);
    trainer.run(remaining, |tr, rec| {
        if let Some(f) = trace.as_mut() {
            writeln!(f, "{},{},{}", rec.step, rec.loss, rec.lr)?;
        }
        if a.log_every > 0 && rec.step % a.log_every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        if let (Some(path), Some(n)) = (&a.checkpoint, every) {
            if (rec.step + 1) % n == 0 {
                checkpoint::save(path, &settings, &tr.model, &tr.opt)?;
            }
        }
        anyhow::Ok(())
    })
    .map(|t| last = t.last().copied())?;
    if let Some(path) = &a.checkpoint {
        checkpoint::save(path, &settings, &trainer.model, &trainer.opt)?;
        eprintln!("checkpoint written to {}", path.display());
    }
    match last {
        Some(rec) => println!("final loss {:.6} at step {}", rec.loss, rec.step),
        None => println!("no steps run"),
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        d: a.d,
        layers: a.layers,
        chunk: a.chunk,
        tokens: a.tokens,
        repeats: a.repeats,
        warmup: a.warmup,
        forward_only: a.forward_only,
        mem_budget_bytes: a.mem_budget_mb << 20,
        seed: a.seed,
    };
    let mut all = Vec::new();
    for name in &a.kinds {
        let kind: ModelKind = name.parse()?;
        let (records, skipped) = bench_latency(kind, &a.lengths, &cfg)?;
        for s in skipped {
            eprintln!("skipped {} T={}: {}", s.kind, s.t, s.reason);
        }
        if let Ok(fit) = fit_records(&records) {
            eprintln!("{kind}: log-log slope {:.3} (R^2 {:.3})", fit.slope, fit.r2);
        }
        all.extend(records);
    }
    let csv = to_csv(&all);
    match &a.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    if !a.greedy {
        bail!("only greedy decoding is supported");
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let prompt: Vec<u32> = fs::read(&a.prompt_file)
        .with_context(|| format!("reading prompt {}", a.prompt_file.display()))?
        .into_iter()
        .map(u32::from)
        .collect();
    if prompt.is_empty() {
        bail!("prompt is empty");
    }
    let dec = Decoder::new(&ck.model)?;
    let room = dec.max_len().saturating_sub(prompt.len());
    if room == 0 {
        bail!("prompt of {} bytes fills the model's {} positions", prompt.len(), dec.max_len());
    }
    let n = a.max_new_tokens.min(room + 1);
    let mut cache = dec.init_cache();
    let mut timings = Vec::new();
    let mut logits = None;
    for &tok in &prompt {
        let t = Instant::now();
        logits = Some(dec.step(&mut cache, tok)?);
        timings.push((cache.position - 1, tok, t.elapsed()));
    }
    let mut out = Vec::with_capacity(n);
    let mut stdout = std::io::stdout().lock();
    while out.len() < n {
        let next = greedy(logits.as_ref().expect("prompt is non-empty"));
        out.push(next as u8);
        stdout.write_all(&[next as u8])?;
        if out.len() < n {
            let t = Instant::now();
            logits = Some(dec.step(&mut cache, next)?);
            timings.push((cache.position - 1, next, t.elapsed()));
        }
    }
    stdout.flush()?;
    if let Some(p) = &a.timing_csv {
        let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        writeln!(f, "position,token,step_us")?;
        for (pos, tok, dt) in timings {
            writeln!(f, "{pos},{tok},{}", dt.as_micros())?;
        }
    }
    Ok(())
}

fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let ids: Vec<u8> = if !a.only.is_empty() {
        a.only.clone()
    } else if a.full {
        ALL.to_vec()
    } else {
        FAST.to_vec()
    };
    let cfg = SuiteConfig {
        train_steps: a.train_steps,
        seed: a.seed,
        ..SuiteConfig::default()
    };
    let mut failed = 0;
    println!("{:<4} {:<34} {:<6} {:>9}", "#", "criterion", "result", "seconds");
    for id in ids {
        let o = run_criterion(id, &cfg);
        println!("{:<4} {:<34} {:<6} {:>9.1}", o.id, o.name, if o.passed { "PASS" } else { "FAIL" }, o.seconds);
        print!("{}", o.detail);
        failed += usize::from(!o.passed);
    }
    println!("{}", if failed == 0 { "all criteria passed".to_string() } else { format!("{failed} criteria failed") });
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
