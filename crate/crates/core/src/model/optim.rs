//! AdamW with a linear warmup / linear decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100_000,
            max_steps: 400_000,
            batch_size: 32,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Rounds a step-denominated quantity by the global step scale, keeping it
/// at least 1.
pub fn scale_steps(steps: u64, step_scale: f64) -> u64 {
    ((steps as f64 * step_scale).round() as u64).max(1)
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps > self.max_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps ({}) <= max_steps ({})",
                self.warmup_steps, self.max_steps
            )));
        }
        if !(self.peak_lr > 0.0) || self.batch_size == 0 {
            return Err(Error::config("peak_lr and batch_size must be positive"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and eps must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        Ok(())
    }

    pub fn scaled(&self, step_scale: f64) -> Self {
        Self {
            warmup_steps: scale_steps(self.warmup_steps, step_scale),
            max_steps: scale_steps(self.max_steps, step_scale),
            ..*self
        }
    }
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then linear decay
/// to 0 at `max_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    let step = step.min(cfg.max_steps);
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else if cfg.max_steps == cfg.warmup_steps {
        cfg.peak_lr
    } else {
        cfg.peak_lr * (cfg.max_steps - step) as f64 / (cfg.max_steps - cfg.warmup_steps) as f64
    }
}

/// Biases, layer-norm gains and offsets are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".b") || name.ends_with(".gamma") || name.ends_with(".beta"))
}

/// First and second moment estimates for one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One decoupled-weight-decay Adam step over paired parameter and
    /// gradient tensors.
    pub fn update(
        &mut self,
        cfg: &OptimizerConfig,
        lr: f64,
        params: Vec<(String, &mut [f64])>,
        grads: &[(String, &[f64])],
    ) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        assert_eq!(params.len(), self.m.len(), "optimizer state tensor count");
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (((name, p), (_, g)), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if decays(&name) {
                1.0 - lr * cfg.weight_decay
            } else {
                1.0
            };
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(100_000, &cfg), 0.001);
        assert_eq!(lr_at(400_000, &cfg), 0.0);
        let mid = lr_at(250_000, &cfg);
        assert!((mid - 0.0005).abs() < 1e-15);
        assert!((lr_at(50_000, &cfg) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_continuous_and_piecewise_linear() {
        let cfg = OptimizerConfig {
            warmup_steps: 10,
            max_steps: 40,
            ..Default::default()
        };
        for s in 1..40u64 {
            let jump = (lr_at(s, &cfg) - lr_at(s - 1, &cfg)).abs();
            assert!(jump <= cfg.peak_lr / 10.0 + 1e-15);
        }
    }

    #[test]
    fn scaling_preserves_proportions() {
        let cfg = OptimizerConfig::default().scaled(0.01);
        assert_eq!(cfg.max_steps, 4_000);
        assert_eq!(cfg.warmup_steps, 1_000);
    }

    #[test]
    fn invalid_warmup() {
        let cfg = OptimizerConfig {
            warmup_steps: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = OptimizerConfig {
            warmup_steps: 10,
            max_steps: 5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_step_on_quadratic_matches_hand_computation() {
        // f(x) = (x - 3)^2 at x = 1: g = -4
        let cfg = OptimizerConfig::default();
        let lr = 0.1;
        let mut x = [1.0f64];
        let g = [2.0 * (x[0] - 3.0)];
        let mut st = AdamState::new([1]);
        st.update(&cfg, lr, vec![("x.w".into(), &mut x[..])], &[("x.w".into(), &g[..])]);
        // m = 0.1 * -4 = -0.4, v = 0.001 * 16 = 0.016
        // mhat = -4, vhat = 16 -> step = lr * -4 / (4 + 1e-8)
        let expected = 1.0 * (1.0 - 0.1 * 0.01) + 0.1 * 4.0 / (4.0 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-15, "{} vs {expected}", x[0]);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = OptimizerConfig::default();
        let mut w = [2.0f64, -1.0];
        let mut b = [0.5f64];
        let zeros = [0.0f64; 2];
        let mut st = AdamState::new([2, 1]);
        st.update(
            &cfg,
            0.01,
            vec![("l.w".into(), &mut w[..]), ("l.b".into(), &mut b[..])],
            &[("l.w".into(), &zeros[..]), ("l.b".into(), &zeros[..1])],
        );
        assert_eq!(w, [2.0 * (1.0 - 0.01 * 0.01), -(1.0 - 0.01 * 0.01)]);
        assert_eq!(b, [0.5]);
    }
}
