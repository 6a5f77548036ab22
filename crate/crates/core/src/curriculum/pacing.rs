use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PacingKind {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacingConfig {
    pub kind: PacingKind,
    pub start_frac: f64,
    pub end_frac: f64,
    pub floor: f64,
}

impl Default for PacingConfig {
    fn default() -> Self {
        Self {
            kind: PacingKind::Linear,
            start_frac: 25_000.0 / 400_000.0,
            end_frac: 350_000.0 / 400_000.0,
            floor: 0.10,
        }
    }
}

impl PacingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.start_frac && self.start_frac < self.end_frac && self.end_frac <= 1.0) {
            return Err(Error::config(format!(
                "pacing needs 0 <= start_frac ({}) < end_frac ({}) <= 1",
                self.start_frac, self.end_frac
            )));
        }
        if !(self.floor > 0.0 && self.floor <= 1.0) {
            return Err(Error::config(format!("pacing floor {} must lie in (0, 1]", self.floor)));
        }
        Ok(())
    }

    pub fn start_step(&self, max_steps: u64) -> f64 {
        self.start_frac * max_steps as f64
    }

    pub fn end_step(&self, max_steps: u64) -> f64 {
        self.end_frac * max_steps as f64
    }
}

/// Fraction of the curriculum available at `step`: `floor` until the start
/// point, 1 from the end point, and a linear or logarithmic ramp between.
pub fn pacing_value(cfg: &PacingConfig, step: u64, max_steps: u64) -> f64 {
    let (start, end) = (cfg.start_step(max_steps), cfg.end_step(max_steps));
    let u = (step as f64 - start) / (end - start);
    ramp(cfg, u)
}

/// The pacing curve as a function of ramp progress `u`.
pub fn ramp(cfg: &PacingConfig, u: f64) -> f64 {
    if u <= 0.0 {
        return cfg.floor;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let shape = match cfg.kind {
        PacingKind::Linear => u,
        PacingKind::Log => (1.0 + (E - 1.0) * u).ln(),
    };
    cfg.floor + (1.0 - cfg.floor) * shape
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(kind: PacingKind) -> PacingConfig {
        PacingConfig {
            kind,
            ..Default::default()
        }
    }

    #[test]
    fn endpoints_are_exact() {
        for kind in [PacingKind::Linear, PacingKind::Log] {
            let c = cfg(kind);
            assert_eq!(pacing_value(&c, 25_000, 400_000), 0.10);
            assert_eq!(pacing_value(&c, 0, 400_000), 0.10);
            assert_eq!(pacing_value(&c, 350_000, 400_000), 1.0);
            assert_eq!(pacing_value(&c, 400_000, 400_000), 1.0);
        }
    }

    #[test]
    fn linear_midpoint() {
        let c = cfg(PacingKind::Linear);
        assert!((pacing_value(&c, 187_500, 400_000) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        let bad = PacingConfig {
            start_frac: 0.5,
            end_frac: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PacingConfig {
            floor: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn monotone_and_log_dominates(a in 0u64..=400_000, b in 0u64..=400_000) {
            let (lo, hi) = (a.min(b), a.max(b));
            for kind in [PacingKind::Linear, PacingKind::Log] {
                let c = cfg(kind);
                prop_assert!(pacing_value(&c, lo, 400_000) <= pacing_value(&c, hi, 400_000));
            }
            prop_assert!(pacing_value(&cfg(PacingKind::Log), a, 400_000) >= pacing_value(&cfg(PacingKind::Linear), a, 400_000));
        }
    }
}
