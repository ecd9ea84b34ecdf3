//! Run settings shared by the subcommands, loadable from JSON.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use flashkit_core::attention::{Aggregation, Kernel};
use flashkit_core::layers::NormKind;
use flashkit_core::model::{ModelConfig, ModelKind, BYTE_VOCAB};
use flashkit_core::optim::OptimConfig;
use flashkit_core::train::{Objective, TrainConfig};

/// Every knob of a training run. Absent JSON fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// `flash_quad`, `flash`, `transformer_pp`, `mhsa_mlp` or `linear_token`.
    pub kind: String,
    pub d: usize,
    /// Defaults to `2 d`.
    pub e: Option<usize>,
    /// Defaults to `min(128, d)`.
    pub s: Option<usize>,
    pub layers: usize,
    pub chunk: usize,
    pub context: usize,
    /// `relu2` or `softmax`.
    pub kernel: String,
    /// `mean` or `sum`.
    pub aggregation: String,
    /// `layer` or `scale`.
    pub norm: String,
    pub tied: bool,
    /// Defaults to `max(1, d / 64)`.
    pub heads: Option<usize>,
    /// `lm` or `mlm`; `mlm` implies a non-causal model with a mask id.
    pub objective: String,
    pub batch: usize,
    pub steps: u64,
    pub warmup: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-tensor gradient norm bound; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub corpus: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let opt = OptimConfig::default();
        Self {
            kind: ModelKind::Flash.name().into(),
            d: 128,
            e: None,
            s: None,
            layers: 4,
            chunk: 64,
            context: 256,
            kernel: "relu2".into(),
            aggregation: "mean".into(),
            norm: "layer".into(),
            tied: true,
            heads: None,
            objective: "lm".into(),
            batch: 2,
            steps: opt.total,
            warmup: opt.warmup,
            lr: opt.lr_peak,
            weight_decay: opt.weight_decay,
            clip: opt.clip.unwrap_or(0.0),
            seed: 0,
            corpus: None,
        }
    }
}

pub fn parse_kernel(s: &str) -> Result<Kernel> {
    match s {
        "relu2" => Ok(Kernel::Relu2),
        "softmax" => Ok(Kernel::Softmax),
        _ => bail!("unknown kernel `{s}` (expected relu2 or softmax)"),
    }
}

pub fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "sum" => Ok(Aggregation::Sum),
        _ => bail!("unknown aggregation `{s}` (expected mean or sum)"),
    }
}

pub fn parse_norm(s: &str) -> Result<NormKind> {
    match s {
        "layer" => Ok(NormKind::Layer),
        "scale" => Ok(NormKind::Scale),
        _ => bail!("unknown norm `{s}` (expected layer or scale)"),
    }
}

pub fn parse_objective(s: &str) -> Result<Objective> {
    match s {
        "lm" => Ok(Objective::Lm),
        "mlm" => Ok(Objective::Mlm),
        _ => bail!("unknown objective `{s}` (expected lm or mlm)"),
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let kind: ModelKind = self.kind.parse()?;
        let mut cfg = ModelConfig::new(kind, self.d, self.layers, self.context, self.chunk);
        if let Some(e) = self.e {
            cfg.e = e;
        }
        if let Some(s) = self.s {
            cfg.s = s;
        }
        if let Some(h) = self.heads {
            cfg.heads = h;
        }
        cfg.kernel = parse_kernel(&self.kernel)?;
        cfg.aggregation = parse_aggregation(&self.aggregation)?;
        cfg.norm = parse_norm(&self.norm)?;
        cfg.tied = self.tied;
        if parse_objective(&self.objective)? == Objective::Mlm {
            cfg.causal = false;
            cfg.vocab = BYTE_VOCAB + 1;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(self.model_config()?, self.batch, self.seed);
        cfg.objective = parse_objective(&self.objective)?;
        cfg.optim = OptimConfig {
            lr_peak: self.lr,
            weight_decay: self.weight_decay,
            clip: (self.clip > 0.0).then_some(self.clip),
            warmup: self.warmup,
            total: self.steps,
            ..OptimConfig::default()
        };
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build() {
        let cfg = Settings::default().train_config().unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Flash);
        assert_eq!((cfg.model.d, cfg.model.e, cfg.model.s), (128, 256, 128));
        assert_eq!(cfg.optim, OptimConfig::default());
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let s: Settings = serde_json::from_str(r#"{"d": 32, "objective": "mlm"}"#).unwrap();
        assert_eq!(s.layers, 4);
        let m = s.model_config().unwrap();
        assert!(!m.causal);
        assert_eq!((m.vocab, m.s), (257, 32));
        assert!(serde_json::from_str::<Settings>(r#"{"depth": 3}"#).is_err());
    }

    #[test]
    fn bad_values_are_reported() {
        let s = Settings {
            kernel: "tanh".into(),
            ..Settings::default()
        };
        assert!(s.model_config().is_err());
        let s = Settings {
            chunk: 100,
            ..Settings::default()
        };
        assert!(s.model_config().is_err());
    }
}
