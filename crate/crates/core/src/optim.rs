//! AdamW with decoupled weight decay, warmup + linear decay, and per-tensor
//! gradient clipping.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-tensor gradient norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub warmup: u64,
    pub total: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_peak: 7e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            clip: Some(0.1),
            warmup: 100,
            total: 2000,
        }
    }
}

/// Linear ramp `0 -> peak` over `warmup` steps, then linear decay to 0 at
/// `total`; 0 past `total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step > total {
        0.0
    } else if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        peak * (total - step) as f64 / (total - warmup) as f64
    }
}

/// Rescales each gradient tensor independently so its L2 norm is at most
/// `threshold`. Returns how many tensors were rescaled.
pub fn clip_local(grads: &mut [Tensor], threshold: f64) -> usize {
    let mut clipped = 0;
    for g in grads {
        let norm = g.norm();
        if norm > threshold {
            let c = threshold / norm;
            g.data_mut().iter_mut().for_each(|x| *x *= c);
            clipped += 1;
        }
    }
    clipped
}

/// Optimizer state: first and second moments shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub step: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape().to_vec());
        Self {
            cfg,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// Learning rate of the next update.
    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, self.cfg.warmup, self.cfg.total, self.cfg.lr_peak)
    }

    /// Clips `grads` (if configured) and applies one update at the scheduled
    /// learning rate, which is returned.
    pub fn update(&mut self, params: &mut [Tensor], mut grads: Vec<Tensor>) -> Result<f64> {
        if let Some(c) = self.cfg.clip {
            clip_local(&mut grads, c);
        }
        let lr = self.lr();
        self.apply(params, &grads, lr)?;
        Ok(lr)
    }

    /// One AdamW update at learning rate `lr` without clipping:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "{} params and {} grads for {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::Dimension(format!(
                    "param {:?} grad {:?} moment {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
        }
        let OptimConfig { beta1: b1, beta2: b2, eps, weight_decay: wd, .. } = self.cfg;
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - libm::pow(b1, t as f64);
        let c2 = 1.0 - libm::pow(b2, t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in iter {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * (m_hat / (libm::sqrt(v_hat) + eps) + wd * *p);
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;

    #[test]
    fn defaults() {
        let c = OptimConfig::default();
        assert_eq!((c.lr_peak, c.beta1, c.beta2, c.eps, c.weight_decay), (7e-4, 0.9, 0.999, 1e-6, 0.01));
        assert_eq!(c.clip, Some(0.1));
    }

    #[test]
    fn schedule_shape() {
        let (w, t, peak) = (100, 2000, 7e-4);
        assert_eq!(lr_schedule(0, w, t, peak), 0.0);
        assert_eq!(lr_schedule(w, w, t, peak), 7e-4);
        assert!((lr_schedule(50, w, t, peak) - 3.5e-4).abs() < 1e-18);
        let mid = (w + t) / 2;
        let want = peak * (t - mid) as f64 / (t - w) as f64;
        assert_eq!(lr_schedule(mid, w, t, peak), want);
        assert!((want - peak / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(t, w, t, peak), 0.0);
        assert_eq!(lr_schedule(t + 1, w, t, peak), 0.0);
        assert_eq!(lr_schedule(0, 0, 10, peak), peak);
        assert_eq!(lr_schedule(5, 5, 5, peak), peak);
    }

    #[test]
    fn local_clipping() {
        let mut grads = vec![
            Tensor::new([2], vec![0.03, 0.04]).unwrap(),
            Tensor::new([2], vec![0.6, 0.8]).unwrap(),
            Tensor::new([1], vec![-2.0]).unwrap(),
        ];
        assert_eq!(clip_local(&mut grads, 0.1), 2);
        assert_eq!(grads[0].data(), &[0.03, 0.04]);
        assert!((grads[1].data()[0] - 0.06).abs() < 1e-15);
        assert!((grads[1].data()[1] - 0.08).abs() < 1e-15);
        assert!((grads[2].data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_only_decay() {
        let p0 = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut params = vec![p0.clone()];
        let mut opt = AdamW::new(OptimConfig::default(), &params);
        let lr = 1e-3;
        opt.apply(&mut params, &[Tensor::zeros([3])], lr).unwrap();
        for (p, q) in params[0].data().iter().zip(p0.data()) {
            assert_eq!(*p, q - lr * 0.01 * q);
        }
    }

    #[test]
    fn scalar_trajectory_matches_reference() {
        // hand-rolled AdamW on f(x) = x^2 from x = 1.5
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-6, 0.01);
        let (mut x, mut m, mut v) = (1.5f64, 0.0, 0.0);
        let mut want = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * (mh / (vh.sqrt() + eps) + wd * x);
            want.push(x);
        }
        let mut params = vec![Tensor::scalar(1.5)];
        let mut opt = AdamW::new(OptimConfig::default(), &params);
        for w in want {
            let g = Tensor::scalar(2.0 * params[0].data()[0]);
            opt.apply(&mut params, &[g], lr).unwrap();
            assert!((params[0].data()[0] - w).abs() < 1e-15);
        }
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // bias correction makes the first update +-lr per coordinate
        let mut params = vec![Tensor::new([2], vec![0.0, 0.0]).unwrap()];
        let mut opt = AdamW::new(OptimConfig::default(), &params);
        opt.apply(&mut params, &[Tensor::new([2], vec![3.0, -0.5]).unwrap()], 0.01).unwrap();
        assert!((params[0].data()[0] + 0.01).abs() < 1e-8);
        assert!((params[0].data()[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn update_uses_schedule_and_clip() {
        let cfg = OptimConfig {
            warmup: 2,
            total: 4,
            ..OptimConfig::default()
        };
        let mut params = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(cfg, &params);
        assert_eq!(opt.update(&mut params, vec![Tensor::scalar(5.0)]).unwrap(), 0.0);
        assert!((opt.update(&mut params, vec![Tensor::scalar(5.0)]).unwrap() - 3.5e-4).abs() < 1e-18);
        assert_eq!(opt.lr(), 7e-4);
        // clipped to 0.1 before entering the moments
        assert!((opt.m[0].data()[0] - (0.9 * 0.01 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros([2])];
        let mut opt = AdamW::new(OptimConfig::default(), &params);
        assert!(opt.apply(&mut params, &[Tensor::zeros([3])], 0.1).is_err());
        assert!(opt.apply(&mut params, &[], 0.1).is_err());
    }
}
