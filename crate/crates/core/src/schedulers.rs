//! Epoch-level learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    None,
    Multistep,
    Cosine,
    Exponential,
    Linear,
    Polynomial,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 6] = [
        SchedulerKind::None,
        SchedulerKind::Multistep,
        SchedulerKind::Cosine,
        SchedulerKind::Exponential,
        SchedulerKind::Linear,
        SchedulerKind::Polynomial,
    ];
}

fn default_ms_gamma() -> f64 {
    0.5
}
fn default_milestones() -> Vec<f64> {
    vec![0.8, 0.9]
}
fn default_exp_gamma() -> f64 {
    0.95
}
fn default_power() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    pub base_lr: f64,
    pub total_epochs: usize,
    #[serde(default = "default_ms_gamma")]
    pub multistep_gamma: f64,
    /// Fractions of `total_epochs` at which the multistep decay applies.
    #[serde(default = "default_milestones")]
    pub multistep_milestones: Vec<f64>,
    #[serde(default = "default_exp_gamma")]
    pub exp_gamma: f64,
    #[serde(default = "default_power")]
    pub poly_power: f64,
    #[serde(default)]
    pub min_lr: f64,
}

impl SchedulerConfig {
    pub fn new(kind: SchedulerKind, base_lr: f64, total_epochs: usize) -> Self {
        Self {
            kind,
            base_lr,
            total_epochs,
            multistep_gamma: default_ms_gamma(),
            multistep_milestones: default_milestones(),
            exp_gamma: default_exp_gamma(),
            poly_power: default_power(),
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::config(format!("scheduler.{field}"), why));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be positive");
        }
        if self.total_epochs == 0 {
            return bad("total_epochs", "must be at least 1");
        }
        if !(self.multistep_gamma > 0.0 && self.multistep_gamma <= 1.0) {
            return bad("multistep_gamma", "must lie in (0, 1]");
        }
        let m = &self.multistep_milestones;
        if m.iter().any(|&f| !(f > 0.0 && f < 1.0)) || m.windows(2).any(|w| w[0] >= w[1]) {
            return bad("multistep_milestones", "must be strictly increasing fractions in (0, 1)");
        }
        if !(self.exp_gamma > 0.0 && self.exp_gamma <= 1.0) {
            return bad("exp_gamma", "must lie in (0, 1]");
        }
        if !(self.poly_power > 0.0) {
            return bad("poly_power", "must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return bad("min_lr", "must lie in [0, base_lr]");
        }
        Ok(())
    }

    /// Epochs at which multistep decay applies.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        self.multistep_milestones
            .iter()
            .map(|f| (f * self.total_epochs as f64 - 1e-9).ceil() as usize)
            .collect()
    }
}

/// Schedule shape as stored in experiment configs. The base rate comes from
/// the optimizer and the length from the epoch count, so overriding either
/// cannot leave the schedule inconsistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSpec {
    pub kind: SchedulerKind,
    #[serde(default = "default_ms_gamma")]
    pub multistep_gamma: f64,
    #[serde(default = "default_milestones")]
    pub multistep_milestones: Vec<f64>,
    #[serde(default = "default_exp_gamma")]
    pub exp_gamma: f64,
    #[serde(default = "default_power")]
    pub poly_power: f64,
    #[serde(default)]
    pub min_lr: f64,
}

impl SchedulerSpec {
    pub fn new(kind: SchedulerKind) -> Self {
        Self::from(&SchedulerConfig::new(kind, 1.0, 1))
    }

    pub fn resolve(&self, base_lr: f64, total_epochs: usize) -> SchedulerConfig {
        SchedulerConfig {
            kind: self.kind,
            base_lr,
            total_epochs,
            multistep_gamma: self.multistep_gamma,
            multistep_milestones: self.multistep_milestones.clone(),
            exp_gamma: self.exp_gamma,
            poly_power: self.poly_power,
            min_lr: self.min_lr,
        }
    }
}

impl From<&SchedulerConfig> for SchedulerSpec {
    fn from(c: &SchedulerConfig) -> Self {
        Self {
            kind: c.kind,
            multistep_gamma: c.multistep_gamma,
            multistep_milestones: c.multistep_milestones.clone(),
            exp_gamma: c.exp_gamma,
            poly_power: c.poly_power,
            min_lr: c.min_lr,
        }
    }
}

/// Learning rate for `epoch` in `[0, total_epochs)`.
pub fn lr_at(cfg: &SchedulerConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside [0, {})",
            cfg.total_epochs
        )));
    }
    let base = cfg.base_lr;
    let frac = epoch as f64 / cfg.total_epochs as f64;
    let lr = match cfg.kind {
        SchedulerKind::None => base,
        SchedulerKind::Multistep => {
            let passed = cfg.milestone_epochs().iter().filter(|&&m| epoch >= m).count();
            base * cfg.multistep_gamma.powi(passed as i32)
        }
        SchedulerKind::Cosine => cfg.min_lr + (base - cfg.min_lr) * (1.0 + (PI * frac).cos()) / 2.0,
        SchedulerKind::Exponential => base * cfg.exp_gamma.powf(epoch as f64),
        SchedulerKind::Linear => (base * (1.0 - frac)).max(cfg.min_lr),
        SchedulerKind::Polynomial => (base * (1.0 - frac).powf(cfg.poly_power)).max(cfg.min_lr),
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        let ms = SchedulerConfig::new(SchedulerKind::Multistep, 1e-4, 100);
        assert_eq!(ms.milestone_epochs(), vec![80, 90]);
        assert_relative_eq!(lr_at(&ms, 79).unwrap(), 1e-4);
        assert_relative_eq!(lr_at(&ms, 85).unwrap(), 5e-5);
        assert_relative_eq!(lr_at(&ms, 95).unwrap(), 2.5e-5);
        let cos = SchedulerConfig::new(SchedulerKind::Cosine, 1e-4, 100);
        assert_relative_eq!(lr_at(&cos, 50).unwrap(), 5e-5, max_relative = 1e-12);
        let exp = SchedulerConfig::new(SchedulerKind::Exponential, 1e-4, 100);
        assert_relative_eq!(lr_at(&exp, 10).unwrap(), 1e-4 * 0.95f64.powi(10), max_relative = 1e-12);
        assert!((lr_at(&exp, 10).unwrap() - 5.987e-5).abs() < 1e-8);
        let lin = SchedulerConfig::new(SchedulerKind::Linear, 1e-4, 10);
        assert_relative_eq!(lr_at(&lin, 5).unwrap(), 5e-5);
        let poly = SchedulerConfig::new(SchedulerKind::Polynomial, 1e-4, 10);
        assert_relative_eq!(lr_at(&poly, 5).unwrap(), 1e-4 * 0.5f64.powf(0.9));
    }

    #[test]
    fn out_of_range_epoch() {
        let c = SchedulerConfig::new(SchedulerKind::None, 1e-4, 10);
        assert!(matches!(lr_at(&c, 10), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn validation() {
        let mut c = SchedulerConfig::new(SchedulerKind::Multistep, 1e-4, 10);
        c.multistep_milestones = vec![0.9, 0.8];
        assert!(c.validate().is_err());
        c.multistep_milestones = vec![0.5, 1.0];
        assert!(c.validate().is_err());
        let mut c = SchedulerConfig::new(SchedulerKind::Multistep, 1e-4, 10);
        c.multistep_gamma = 0.0;
        assert!(c.validate().is_err());
        assert!(SchedulerConfig::new(SchedulerKind::None, 0.0, 10).validate().is_err());
        assert!(SchedulerConfig::new(SchedulerKind::None, 1e-3, 0).validate().is_err());
    }

    fn kind() -> impl Strategy<Value = SchedulerKind> {
        prop::sample::select(SchedulerKind::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn starts_at_base_and_never_increases(k in kind(), base in 1e-6f64..1.0, total in 1usize..300) {
            let c = SchedulerConfig::new(k, base, total);
            prop_assert_eq!(lr_at(&c, 0).unwrap(), base);
            let mut prev = base;
            for e in 0..total {
                let lr = lr_at(&c, e).unwrap();
                prop_assert!(lr <= prev * (1.0 + 1e-12));
                prop_assert!(lr >= c.min_lr);
                prev = lr;
            }
        }

        #[test]
        fn cosine_endpoint(base in 1e-6f64..1.0, total in 1usize..500) {
            let c = SchedulerConfig::new(SchedulerKind::Cosine, base, total);
            let t = total as f64;
            let expect = base * (1.0 + (PI * ((t - 1.0) / t)).cos()) / 2.0;
            prop_assert_eq!(lr_at(&c, total - 1).unwrap(), expect);
        }

        #[test]
        fn exponential_is_log_linear(base in 1e-6f64..1.0, total in 3usize..200) {
            let c = SchedulerConfig::new(SchedulerKind::Exponential, base, total);
            let l0 = lr_at(&c, 0).unwrap().ln();
            let slope = lr_at(&c, 1).unwrap().ln() - l0;
            for e in 0..total {
                let got = lr_at(&c, e).unwrap().ln();
                prop_assert!((got - (l0 + slope * e as f64)).abs() < 1e-12);
            }
        }
    }
}
