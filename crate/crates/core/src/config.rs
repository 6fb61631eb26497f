//! Experiment configuration: strict TOML parsing, `key.path=value`
//! overrides and the seed-independent config hash.

use std::path::Path;

use candle_core::Device;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{BackboneSpec, Family};
use crate::data::{AugmentationConfig, DatasetName, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::schedulers::{SchedulerConfig, SchedulerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with decoupled weight decay.
    Adamw,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl OptimizerConfig {
    /// AdamW at 1e-4 with weight decay 1e-4; plain ViTs use 6e-5 and 0.05.
    pub fn for_family(family: Family) -> Self {
        let (base_lr, weight_decay) = match family {
            Family::Vit => (6e-5, 0.05),
            _ => (1e-4, 1e-4),
        };
        Self {
            algorithm: OptimizerKind::Adamw,
            base_lr,
            weight_decay,
            betas: default_betas(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("optimizer.base_lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::config("optimizer.betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

fn default_threshold() -> f32 {
    0.5
}

/// Model settings beyond the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_channels: Option<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_path: Option<f64>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            decoder_channels: None,
            threshold: default_threshold(),
            drop_path: None,
        }
    }
}

fn yes() -> bool {
    true
}

/// Everything that defines one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Must stay false: every parameter is optimised.
    #[serde(default)]
    pub freeze_backbone: bool,
    /// Permits more than 50 epochs on OSCD.
    #[serde(default)]
    pub allow_long_oscd: bool,
    /// Single-threaded, fully seeded execution.
    #[serde(default = "yes")]
    pub deterministic: bool,
    /// Also score the (unaugmented) training split after the last epoch.
    #[serde(default)]
    pub eval_train: bool,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub model: ModelOptions,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    pub loss: LossConfig,
    pub scheduler: SchedulerSpec,
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetSpec,
}

pub const MAX_OSCD_EPOCHS: usize = 50;

impl ExperimentConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            decoder_channels: self.model.decoder_channels,
            threshold: self.model.threshold,
            drop_path: self.model.drop_path,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        self.scheduler.resolve(self.optimizer.base_lr, self.epochs)
    }

    /// Checks every section; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.freeze_backbone {
            return Err(Error::config(
                "freeze_backbone",
                "the backbone is never frozen; all parameters are optimised",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.dataset.name == DatasetName::Oscd && self.epochs > MAX_OSCD_EPOCHS && !self.allow_long_oscd {
            return Err(Error::config(
                "epochs",
                format!("OSCD trains for at most {MAX_OSCD_EPOCHS} epochs unless allow_long_oscd is set"),
            ));
        }
        self.backbone
            .validate()
            .map_err(|e| Error::config("backbone", e.to_string()))?;
        self.model_config().validate()?;
        self.augmentation.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.scheduler_config().validate()?;
        self.dataset.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Parses and validates a TOML document. Unknown keys are rejected.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(origin, e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Applies `key.path=value` assignments; values are TOML literals, and
    /// bare words are taken as strings. The result is re-validated.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "expected key.path=value"))?;
            let key = key.trim();
            set_path(&mut doc, key, parse_literal(raw.trim()))?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("override", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of everything except the seeds, so runs of one configuration
    /// share a directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("seeds");
        }
        let canon = serde_json::to_string(&v).expect("value serializes");
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Device selector, `cpu` by default.
pub const DEVICE_ENV: &str = "BITEMPORAL_DEVICE";
/// Root directory for run outputs, `runs` by default.
pub const OUTPUT_ENV: &str = "BITEMPORAL_OUTPUT";

/// Resolves a device name. This build computes on the CPU only, so any
/// accelerator request is an environment error.
pub fn select_device(selector: Option<&str>) -> Result<Device> {
    let env = std::env::var(DEVICE_ENV).ok();
    let name = selector.or(env.as_deref()).unwrap_or("cpu").trim().to_ascii_lowercase();
    match name.as_str() {
        "" | "cpu" => Ok(Device::Cpu),
        other => Err(Error::Environment(format!(
            "device `{other}` is unavailable; this build supports `cpu` only"
        ))),
    }
}

pub fn output_root() -> std::path::PathBuf {
    std::env::var_os(OUTPUT_ENV).map_or_else(|| "runs".into(), Into::into)
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = doc;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..=i].join("."), "is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn overrides_apply_and_revalidate() {
        let base = presets::preset("btc-b").unwrap();
        let c = base.with_overrides(&["scheduler.kind=none"]).unwrap();
        assert_eq!(c.scheduler.kind, crate::schedulers::SchedulerKind::None);
        let c = base.with_overrides(&["seeds=[4, 5]", "loss.kind=ce+dice"]).unwrap();
        assert_eq!(c.seeds, vec![4, 5]);
        let e = base.with_overrides(&["freeze_backbone=true"]).unwrap_err();
        assert!(matches!(e, Error::InvalidConfig { ref path, .. } if path == "freeze_backbone"));
        assert!(base.with_overrides(&["no_such_key=1"]).is_err());
        assert!(base.with_overrides(&["epochs"]).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = presets::preset("baseline").unwrap().to_toml().unwrap();
        text.push_str("\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&text, "t").is_err());
    }

    #[test]
    fn hash_ignores_seeds_only() {
        let a = presets::preset("baseline").unwrap();
        let b = a.with_overrides(&["seeds=[9]"]).unwrap();
        let c = a.with_overrides(&["batch_size=16"]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn device_selection() {
        assert!(matches!(select_device(Some("cpu")), Ok(Device::Cpu)));
        let e = select_device(Some("cuda:0")).unwrap_err();
        assert_eq!(e.class(), crate::ErrorClass::Environment);
    }

    #[test]
    fn oscd_epoch_cap() {
        let mut c = presets::preset("baseline").unwrap();
        c.dataset = DatasetSpec::for_dataset(DatasetName::Oscd, "data/OSCD");
        c.epochs = 100;
        assert!(c.validate().is_err());
        c.allow_long_oscd = true;
        c.validate().unwrap();
        c.allow_long_oscd = false;
        c.epochs = 50;
        c.validate().unwrap();
    }
}
