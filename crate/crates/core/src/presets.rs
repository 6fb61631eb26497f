//! Shipped experiment presets.
//!
//! `baseline` is the reference recipe: Swin-T with ImageNet-1k weights,
//! cross entropy, no augmentation, constant learning rate. `combined-step0`
//! to `combined-step6` add one change at a time on the way to the final
//! recipe, which `btc-t` (Swin-T) and `btc-b` (Swin-B) name directly.

use crate::backbones::{BackboneSpec, Family, Pretrain};
use crate::config::{ExperimentConfig, ModelOptions, OptimizerConfig};
use crate::data::{AugmentationConfig, DatasetName, DatasetSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::schedulers::{SchedulerKind, SchedulerSpec};

pub const PRESET_NAMES: [&str; 10] = [
    "baseline",
    "btc-t",
    "btc-b",
    "combined-step0",
    "combined-step1",
    "combined-step2",
    "combined-step3",
    "combined-step4",
    "combined-step5",
    "combined-step6",
];

/// Reference change-class F1 (percent) of the combined steps, columns in
/// [`COMBINED_DATASETS`] order followed by the average.
pub const COMBINED_REFERENCE_F1: [[f64; 7]; 7] = [
    [77.0, 88.2, 76.7, 87.5, 62.7, 37.0, 71.5],
    [82.0, 91.0, 83.5, 88.8, 74.6, 47.6, 77.9],
    [81.3, 91.4, 85.4, 90.0, 78.7, 51.0, 79.6],
    [81.0, 91.5, 85.9, 90.1, 79.1, 54.8, 80.4],
    [81.0, 91.6, 86.2, 90.5, 79.4, 54.9, 80.6],
    [81.8, 91.7, 86.0, 90.7, 81.6, 52.4, 80.7],
    [82.4, 91.5, 85.6, 90.7, 80.9, 54.3, 80.9],
];

pub const COMBINED_DATASETS: [DatasetName; 6] = [
    DatasetName::Sysu,
    DatasetName::Levir,
    DatasetName::Egybcd,
    DatasetName::Gvlm,
    DatasetName::Clcd,
    DatasetName::Oscd,
];

/// Largest per-cell seed std of the combined steps, in F1 points.
pub const COMBINED_TOLERANCE: f64 = 0.7;

fn base(spec: BackboneSpec) -> ExperimentConfig {
    let optimizer = OptimizerConfig::for_family(spec.family);
    ExperimentConfig {
        epochs: 100,
        batch_size: 32,
        seeds: vec![0, 1, 2],
        freeze_backbone: false,
        allow_long_oscd: false,
        deterministic: true,
        eval_train: false,
        backbone: spec,
        model: ModelOptions::default(),
        augmentation: AugmentationConfig::none(),
        loss: LossConfig::new(LossKind::Ce),
        scheduler: SchedulerSpec::new(SchedulerKind::None),
        optimizer,
        dataset: DatasetSpec::for_dataset(DatasetName::Levir, "data/LEVIR"),
    }
}

fn swin(size: &str, pretrain: Pretrain) -> BackboneSpec {
    BackboneSpec::new(Family::Swin, size, pretrain)
}

fn combined(step: usize) -> ExperimentConfig {
    let pretrain = match step {
        0 => Pretrain::None,
        1 | 2 => Pretrain::In1k,
        _ => Pretrain::CityscapesSemantic,
    };
    let size = if step >= 5 { "base" } else { "tiny" };
    let mut c = base(swin(size, pretrain));
    if step >= 2 {
        c.augmentation = AugmentationConfig::flip();
    }
    if step >= 4 {
        c.scheduler = SchedulerSpec::new(SchedulerKind::Cosine);
    }
    if step >= 6 {
        c.loss = LossConfig::new(LossKind::Dice);
    }
    c
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let cfg = match name {
        "baseline" => base(swin("tiny", Pretrain::In1k)),
        "btc-b" => combined(6),
        "btc-t" => {
            let mut c = combined(6);
            c.backbone = swin("tiny", Pretrain::CityscapesSemantic);
            c
        }
        _ => match name.strip_prefix("combined-step").and_then(|s| s.parse::<usize>().ok()) {
            Some(step) if step <= 6 => combined(step),
            _ => {
                return Err(Error::NotFound(format!(
                    "preset `{name}`; available: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        },
    };
    Ok(cfg)
}

/// Every preset with its dataset switched to `dataset` and the epoch count
/// set to that dataset's default.
pub fn for_dataset(name: &str, dataset: DatasetSpec) -> Result<ExperimentConfig> {
    let mut c = preset(name)?;
    c.epochs = dataset.name.default_epochs();
    c.dataset = dataset;
    Ok(c)
}

/// A small experiment on synthetic data: the `baseline` recipe with a
/// randomly initialised `backbone` (`family-size`), one seed and batch 8.
pub fn desk(backbone: &str, train: usize, test: usize, size: usize, epochs: usize) -> Result<ExperimentConfig> {
    let mut c = preset("baseline")?;
    c.backbone = BackboneSpec::parse(backbone)?;
    c.optimizer = OptimizerConfig::for_family(c.backbone.family);
    c.dataset = DatasetSpec::synthetic(
        size,
        SyntheticSpec {
            train,
            val: 0,
            test,
            change_ratio: 0.1,
            seed: 0,
        },
    );
    c.epochs = epochs;
    c.batch_size = 8;
    c.seeds = vec![0];
    Ok(c)
}

pub const DOWNSCALED_LR: f64 = 2e-3;

/// `name` shrunk to run on a CPU in minutes: a randomly initialised nano
/// encoder of the same family, 64 synthetic 128x128 training pairs, 30
/// epochs of batch 8 and training-split scoring. A nano model starts from
/// scratch rather than from pretrained weights, so it takes a higher
/// learning rate than the preset.
pub fn downscaled(name: &str) -> Result<ExperimentConfig> {
    let full = preset(name)?;
    let mut c = full.clone();
    c.backbone = BackboneSpec::new(full.backbone.family, "nano", Pretrain::None);
    c.dataset = DatasetSpec::synthetic(
        128,
        SyntheticSpec {
            train: 64,
            val: 0,
            test: 16,
            change_ratio: 0.1,
            seed: 0,
        },
    );
    c.epochs = 30;
    c.batch_size = 8;
    c.eval_train = true;
    c.optimizer.base_lr = DOWNSCALED_LR;
    Ok(c)
}
