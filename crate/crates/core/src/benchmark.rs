//! Inference cost: latency and FPS, operation counts and parameter splits.
//!
//! Latency follows a fixed protocol. A half-precision model receives one
//! pre-staged pair of 256x256 half-precision images. After a warm-up block
//! of forward passes, the next block is timed, and the mean per-pass time of
//! that block is one runtime sample. The whole procedure repeats several
//! times. The timed region covers the complete forward pass including
//! thresholding.

use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::Aggregate;
use crate::model::ChangeModel;
use crate::nn::flops::count_macs;

pub const BENCH_SIZE: usize = 256;

/// Pass counts of the latency protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyProtocol {
    pub warmup_passes: usize,
    pub timed_passes: usize,
    pub repeats: usize,
    pub size: usize,
}

impl Default for LatencyProtocol {
    fn default() -> Self {
        Self {
            warmup_passes: 1000,
            timed_passes: 1000,
            repeats: 5,
            size: BENCH_SIZE,
        }
    }
}

impl LatencyProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.timed_passes == 0 || self.repeats == 0 {
            return Err(Error::InvalidArgument(
                "timed passes and repeats must be at least 1".into(),
            ));
        }
        if self.size < crate::model::SIZE_MULTIPLE {
            return Err(Error::InvalidArgument(format!("input size {} too small", self.size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub protocol: LatencyProtocol,
    /// Mean per-pass milliseconds of each repeat.
    pub runtime_samples_ms: Vec<f64>,
    pub inference_ms_mean: f64,
    pub inference_ms_std: f64,
    pub fps: f64,
    pub single_sample: bool,
    /// Forward passes actually executed, warm-up included.
    pub passes_executed: usize,
    pub precision_mode: String,
    pub device_descriptor: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub gflops: f64,
    pub input_size: usize,
    /// Counted from the dense contractions of the forward pass rather than
    /// by a hardware profiler.
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub backbone: String,
    pub inference_ms_mean: f64,
    pub inference_ms_std: f64,
    pub fps: f64,
    pub gflops: f64,
    pub gflops_approximate: bool,
    pub params_encoder: usize,
    pub params_decoder: usize,
    pub params_total: usize,
    pub device_descriptor: String,
    pub precision_mode: String,
    pub latency: LatencyReport,
}

pub fn fps_from_ms(ms: f64) -> f64 {
    1000.0 / ms
}

pub fn device_descriptor(device: &Device) -> String {
    match device {
        Device::Cpu => format!(
            "cpu ({} threads, {})",
            rayon::current_num_threads(),
            std::env::consts::ARCH
        ),
        other => format!("{other:?}"),
    }
}

fn precision_name(dtype: DType) -> String {
    match dtype {
        DType::F16 => "float16".into(),
        DType::BF16 => "bfloat16".into(),
        DType::F32 => "float32".into(),
        d => format!("{d:?}").to_lowercase(),
    }
}

fn check_finite(prob: &Tensor) -> Result<()> {
    let v = prob.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Precision(format!(
            "non-finite output in {} inference",
            precision_name(prob.dtype())
        )))
    }
}

/// Times `model` under `protocol`; the model's dtype is the precision mode.
pub fn measure_latency(model: &ChangeModel, protocol: &LatencyProtocol) -> Result<LatencyReport> {
    protocol.validate()?;
    let dev = model.device();
    let s = protocol.size;
    let mk = || -> Result<Tensor> { Ok(Tensor::rand(0f32, 1f32, (1, 3, s, s), dev)?.to_dtype(model.dtype())?) };
    let (pre, post) = (mk()?, mk()?);
    let threshold = f64::from(model.threshold());
    let pass = || -> Result<Tensor> {
        let prob = model.forward_batch(&pre, &post, false)?;
        prob.gt(threshold)?;
        Ok(prob)
    };
    check_finite(&pass()?)?;
    let mut executed = 1;
    let mut samples = Vec::with_capacity(protocol.repeats);
    for _ in 0..protocol.repeats {
        for _ in 0..protocol.warmup_passes {
            pass()?;
        }
        dev.synchronize()?;
        let start = Instant::now();
        let mut last = None;
        for _ in 0..protocol.timed_passes {
            last = Some(pass()?);
        }
        dev.synchronize()?;
        let elapsed = start.elapsed().as_secs_f64() * 1000.0;
        executed += protocol.warmup_passes + protocol.timed_passes;
        if let Some(p) = last {
            check_finite(&p)?;
        }
        samples.push(elapsed / protocol.timed_passes as f64);
    }
    let agg = Aggregate::of(&samples)?;
    Ok(LatencyReport {
        protocol: *protocol,
        inference_ms_mean: agg.mean,
        inference_ms_std: agg.std,
        fps: fps_from_ms(agg.mean),
        single_sample: agg.single_sample,
        runtime_samples_ms: samples,
        passes_executed: executed,
        precision_mode: precision_name(model.dtype()),
        device_descriptor: device_descriptor(dev),
    })
}

/// Operations of one forward pass on a `size`x`size` pair, in GFLOPs
/// (two per multiply-accumulate).
pub fn count_flops(model: &ChangeModel, size: usize) -> Result<FlopReport> {
    let x = Tensor::zeros((1, 3, size, size), DType::F32, model.device())?;
    let (out, macs) = count_macs(|| model.forward_batch(&x, &x, false));
    out?;
    Ok(FlopReport {
        gflops: 2.0 * macs as f64 / 1e9,
        input_size: size,
        approximate: true,
    })
}

/// Latency, operations and parameters of the model `config` describes. The
/// timed model uses seeded random half-precision weights, since timing does
/// not depend on weight values; counting uses a zero-weight build.
pub fn report_efficiency(config: &ExperimentConfig, protocol: &LatencyProtocol, device: &Device) -> Result<BenchReport> {
    let mc = config.model_config();
    let skeleton = ChangeModel::skeleton(&mc)?;
    let split = skeleton.parameter_split();
    let flops = count_flops(&skeleton, BENCH_SIZE)?;
    drop(skeleton);
    let model = ChangeModel::random(&mc, config.seeds.first().copied().unwrap_or(0), DType::F16, device)?;
    let latency = measure_latency(&model, protocol)?;
    Ok(BenchReport {
        backbone: config.backbone.to_string(),
        inference_ms_mean: latency.inference_ms_mean,
        inference_ms_std: latency.inference_ms_std,
        fps: latency.fps,
        gflops: flops.gflops,
        gflops_approximate: flops.approximate,
        params_encoder: split.encoder_params,
        params_decoder: split.decoder_params,
        params_total: split.total,
        device_descriptor: latency.device_descriptor.clone(),
        precision_mode: latency.precision_mode.clone(),
        latency,
    })
}

impl BenchReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "backbone",
    "fps",
    "params_m",
    "gflops",
    "inference_ms_mean",
    "inference_ms_std",
    "precision",
];

/// Writes one row per report, efficiency columns first.
pub fn write_csv<W: std::io::Write>(w: W, reports: &[BenchReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let ser = |e: csv::Error| Error::Serde(e.to_string());
    out.write_record(CSV_HEADER).map_err(ser)?;
    for r in reports {
        out.write_record([
            r.backbone.clone(),
            format!("{:.1}", r.fps),
            format!("{:.1}", r.params_total as f64 / 1e6),
            format!("{:.1}", r.gflops),
            format!("{:.3}", r.inference_ms_mean),
            format!("{:.3}", r.inference_ms_std),
            r.precision_mode.clone(),
        ])
        .map_err(ser)?;
    }
    out.flush().map_err(|e| Error::io("csv output", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::BackboneSpec;
    use crate::model::ModelConfig;

    fn nano(name: &str, dtype: DType) -> ChangeModel {
        let cfg = ModelConfig::new(BackboneSpec::parse(name).unwrap());
        ChangeModel::random(&cfg, 0, dtype, &Device::Cpu).unwrap()
    }

    #[test]
    fn fps_identity_and_pass_count() {
        let m = nano("resnet-nano", DType::F16);
        let p = LatencyProtocol {
            warmup_passes: 2,
            timed_passes: 3,
            repeats: 2,
            size: 64,
        };
        let r = measure_latency(&m, &p).unwrap();
        assert_eq!(r.runtime_samples_ms.len(), 2);
        assert_eq!(r.passes_executed, 1 + 2 * 5);
        assert_eq!(r.fps, 1000.0 / r.inference_ms_mean);
        assert_eq!(r.precision_mode, "float16");
        assert!(!r.single_sample);
    }

    #[test]
    fn single_repeat_flagged() {
        let m = nano("swin-nano", DType::F16);
        let p = LatencyProtocol {
            warmup_passes: 0,
            timed_passes: 1,
            repeats: 1,
            size: 64,
        };
        let r = measure_latency(&m, &p).unwrap();
        assert!(r.single_sample);
        assert_eq!(r.inference_ms_std, 0.0);
    }

    #[test]
    fn fps_of_reference_latency() {
        assert!((fps_from_ms(17.3) - 57.8).abs() < 0.05);
    }

    #[test]
    fn flops_grow_with_area() {
        let m = ChangeModel::skeleton(&ModelConfig::new(BackboneSpec::parse("swin-nano").unwrap())).unwrap();
        let a = count_flops(&m, 256).unwrap().gflops;
        let b = count_flops(&m, 362).unwrap().gflops;
        let ratio = b / a;
        assert!((1.9..=4.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn report_round_trips_and_csv() {
        let mut c = crate::presets::desk("vit-nano", 4, 2, 32, 1).unwrap();
        c.seeds = vec![0];
        let p = LatencyProtocol {
            warmup_passes: 1,
            timed_passes: 1,
            repeats: 2,
            size: 64,
        };
        let r = report_efficiency(&c, &p, &Device::Cpu).unwrap();
        assert_eq!(r.params_total, r.params_encoder + r.params_decoder);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.json");
        r.write_json(&path).unwrap();
        assert_eq!(BenchReport::read_json(&path).unwrap(), r);
        let mut buf = Vec::new();
        write_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("backbone,fps,params_m"));
        assert_eq!(text.lines().count(), 2);
    }
}
