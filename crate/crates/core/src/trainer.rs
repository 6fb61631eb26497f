//! Supervised training of one seed and the multi-seed experiment runner.
//!
//! Every seed derives three independent random streams: parameter init of
//! non-pretrained weights (and dropout noise), the per-epoch data order, and
//! augmentation draws. Nothing else depends on the seed. Each epoch
//! reshuffles the training split and keeps the last incomplete batch. The
//! model from the final epoch is evaluated on the test split.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{apply_paired_augmentation, load_dataset, preprocess, Sample, Split};
use crate::error::{Error, Result};
use crate::evaluation::{accumulate, aggregate, ConfusionCounts, MetricsReport};
use crate::losses::loss_from_logits;
use crate::model::{stack_images, ChangeModel};
use crate::schedulers::lr_at;

const ORDER_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub per_epoch: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub test_metrics: MetricsReport,
    /// Training-split scores when `eval_train` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_metrics: Option<MetricsReport>,
}

/// Preprocessed train and test splits, shared by all seeds of a run.
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl PreparedData {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let load = |split| -> Result<Vec<Sample>> {
            load_dataset(&config.dataset, split)?
                .into_iter()
                .map(|s| preprocess(s, &config.dataset))
                .collect()
        };
        let train = load(Split::Train)?;
        let test = load(Split::Test)?;
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        Ok(Self { train, test })
    }
}

/// Where and how a run executes.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub device: Device,
    /// Seed directory for checkpoint, metrics and traces; nothing is
    /// written when unset.
    pub run_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            device: Device::Cpu,
            run_dir: None,
        }
    }
}

fn batch_tensors(batch: &[Sample], device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    let pre = stack_images(batch.iter().map(|s| &s.pair.pre), device)?;
    let post = stack_images(batch.iter().map(|s| &s.pair.post), device)?;
    let (h, w) = batch[0].gt.hw();
    let gt: Vec<f32> = batch
        .iter()
        .flat_map(|s| s.gt.as_array().iter().map(|&v| f32::from(v)).collect::<Vec<_>>())
        .collect();
    let gt = Tensor::from_vec(gt, (batch.len(), 1, h, w), device)?;
    Ok((pre, post, gt))
}

/// Scores `model` on `samples` with pooled counts.
pub fn evaluate_model(model: &ChangeModel, samples: &[Sample], batch_size: usize) -> Result<MetricsReport> {
    let mut counts = ConfusionCounts::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let pairs: Vec<_> = chunk.iter().map(|s| &s.pair).collect();
        for (pred, s) in model.predict(&pairs)?.iter().zip(chunk) {
            counts = accumulate(counts, &pred.mask, &s.gt)?;
        }
    }
    Ok(MetricsReport::from_counts(counts))
}

/// Trains one seed, loading data itself.
pub fn train(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    config.validate()?;
    let data = PreparedData::load(config)?;
    train_on(config, seed, &data, &TrainOptions::default())
}

/// Trains one seed on already prepared data.
pub fn train_on(config: &ExperimentConfig, seed: u64, data: &PreparedData, opts: &TrainOptions) -> Result<RunResult> {
    config.validate()?;
    let mut log = String::new();
    let mut note = |line: String| {
        log::info!("{line}");
        let _ = writeln!(log, "{line}");
    };
    let model = ChangeModel::new(&config.model_config(), seed, &opts.device)?;
    if let Some(r) = model.load_report() {
        note(format!(
            "pretrained encoder: {} tensors loaded, probe exact: {}",
            r.loaded, r.probe_exact
        ));
    }
    let sched = config.scheduler_config();
    let o = &config.optimizer;
    let mut optim = AdamW::new(
        model.store().trainable_vars(),
        ParamsAdamW {
            lr: o.base_lr,
            beta1: o.betas.0,
            beta2: o.betas.1,
            eps: o.eps,
            weight_decay: o.weight_decay,
        },
    )?;
    let mut order_rng = stream(seed, ORDER_STREAM);
    let mut aug_rng = stream(seed, AUGMENT_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut per_epoch = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_at(&sched, epoch)?;
        optim.set_learning_rate(lr);
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = if config.augmentation.any_enabled() {
                idx.iter()
                    .map(|&i| apply_paired_augmentation(&data.train[i], &config.augmentation, &mut aug_rng).map(|(s, _)| s))
                    .collect::<Result<_>>()?
            } else {
                idx.iter().map(|&i| data.train[i].clone()).collect()
            };
            let (pre, post, gt) = batch_tensors(&batch, &opts.device)?;
            let logits = model.forward_logits(&pre, &post, true)?;
            let loss = loss_from_logits(&config.loss, &logits, &gt)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { epoch, loss: value });
            }
            optim.backward_step(&loss)?;
            loss_sum += value;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        note(format!(
            "seed {seed} epoch {epoch}: loss {train_loss:.5} lr {lr:.3e} ({:.1}s)",
            started.elapsed().as_secs_f64()
        ));
        per_epoch.push(EpochRecord { epoch, train_loss, lr });
    }

    let test_metrics = evaluate_model(&model, &data.test, config.batch_size)?;
    note(format!("seed {seed} test F1 {:.4}", test_metrics.f1));
    let train_metrics = if config.eval_train {
        let m = evaluate_model(&model, &data.train, config.batch_size)?;
        note(format!("seed {seed} train F1 {:.4}", m.f1));
        Some(m)
    } else {
        None
    };

    let mut final_checkpoint = None;
    if let Some(dir) = &opts.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ck = dir.join("checkpoint.safetensors");
        model.save_checkpoint(&ck, Some(&serde_json::to_string(config)?))?;
        final_checkpoint = Some(ck);
        test_metrics.write_json(&dir.join("metrics.json"))?;
        if let Some(m) = &train_metrics {
            m.write_json(&dir.join("train_metrics.json"))?;
        }
        write_lr_trace(&dir.join("lr_trace.csv"), &per_epoch)?;
        let p = dir.join("log.txt");
        std::fs::write(&p, &log).map_err(|e| Error::io(&p, e))?;
    }
    Ok(RunResult {
        seed,
        per_epoch,
        final_checkpoint,
        test_metrics,
        train_metrics,
    })
}

fn write_lr_trace(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum SeedOutcome {
    Completed(RunResult),
    Failed { seed: u64, error: String },
}

impl SeedOutcome {
    pub fn seed(&self) -> u64 {
        match self {
            SeedOutcome::Completed(r) => r.seed,
            SeedOutcome::Failed { seed, .. } => *seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Row name in summary tables, such as the preset name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub config_hash: String,
    pub per_seed: Vec<SeedOutcome>,
    /// Aggregate over completed seeds; absent when none completed.
    pub aggregate: Option<MetricsReport>,
    /// Aggregate of the training-split scores, when collected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_aggregate: Option<MetricsReport>,
    /// False when any seed failed.
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
}

impl ExperimentReport {
    /// Writes `summary.json` into the run directory, if there is one.
    pub fn write_summary(&self) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let p = dir.join("summary.json");
            std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read_summary(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn completed(&self) -> impl Iterator<Item = &RunResult> {
        self.per_seed.iter().filter_map(|o| match o {
            SeedOutcome::Completed(r) => Some(r),
            _ => None,
        })
    }
}

/// Runs every seed of `config`. With `out_root`, artifacts go to
/// `<out_root>/<config hash>/<seed>/`. A failing seed does not stop the
/// others; the report marks it and aggregates the rest.
pub fn run_experiment(config: &ExperimentConfig, out_root: Option<&Path>, device: &Device) -> Result<ExperimentReport> {
    config.validate()?;
    let data = PreparedData::load(config)?;
    let hash = config.hash();
    let run_dir = out_root.map(|r| r.join(&hash));
    if let Some(dir) = &run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.toml");
        std::fs::write(&p, config.to_toml()?).map_err(|e| Error::io(&p, e))?;
    }
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for (i, &seed) in config.seeds.iter().enumerate() {
        let opts = TrainOptions {
            device: device.clone(),
            // repeated seeds get distinct directories
            run_dir: run_dir.as_ref().map(|d| {
                let repeats = config.seeds[..i].iter().filter(|&&s| s == seed).count();
                if repeats == 0 {
                    d.join(seed.to_string())
                } else {
                    d.join(format!("{seed}-{repeats}"))
                }
            }),
        };
        per_seed.push(match train_on(config, seed, &data, &opts) {
            Ok(r) => SeedOutcome::Completed(r),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                SeedOutcome::Failed {
                    seed,
                    error: e.to_string(),
                }
            }
        });
    }
    let done: Vec<&RunResult> = per_seed
        .iter()
        .filter_map(|o| match o {
            SeedOutcome::Completed(r) => Some(r),
            _ => None,
        })
        .collect();
    let tests: Vec<MetricsReport> = done.iter().map(|r| r.test_metrics.clone()).collect();
    let trains: Vec<MetricsReport> = done.iter().filter_map(|r| r.train_metrics.clone()).collect();
    let report = ExperimentReport {
        label: None,
        config_hash: hash,
        complete: done.len() == per_seed.len(),
        aggregate: aggregate(&tests).ok(),
        train_aggregate: aggregate(&trains).ok(),
        per_seed,
        run_dir: run_dir.clone(),
    };
    report.write_summary()?;
    Ok(report)
}
