//! `bitemporal`: data ingestion, training, ablations, evaluation,
//! benchmarking and figures for bi-temporal change detection.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 missing
//! environment (device, data, weights), 4 runtime failure.

mod ablate;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bitemporal::backbones::{self, weights, BackboneSpec};
use bitemporal::benchmark::{self, LatencyProtocol};
use bitemporal::config::{output_root, select_device, ExperimentConfig};
use bitemporal::data::{
    denormalize, ingest_directory, ingest_synthetic, load_dataset, preprocess, DatasetName, DatasetSpec, Sample,
    Split, SyntheticSpec,
};
use bitemporal::evaluation::{accumulate, per_image_mean_f1, render_panel, ConfusionCounts, MetricsReport};
use bitemporal::model::ChangeModel;
use bitemporal::presets;
use bitemporal::trainer::{evaluate_model, run_experiment, SeedOutcome};
use bitemporal::{Device, Error, ErrorClass, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bitemporal", version, about = "Bi-temporal change detection experiments")]
struct Cli {
    /// Compute device; only `cpu` is available in this build.
    #[arg(long, global = true, env = "BITEMPORAL_DEVICE")]
    device: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a dataset distribution into the canonical layout.
    Ingest(IngestArgs),
    /// List or download encoder weights.
    #[command(subcommand)]
    Backbones(BackbonesCmd),
    /// Train every seed of one configuration.
    Train(TrainArgs),
    /// Run a single-axis ablation matrix.
    Ablate(AblateArgs),
    /// Score a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Measure latency, operations and parameters.
    Benchmark(BenchmarkArgs),
    /// Write qualitative panels for chosen samples.
    Visualize(VisualizeArgs),
    /// Collect finished runs into a results table.
    Report(ReportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Dataset name: SYSU, LEVIR, EGYBCD, GVLM, CLCD, OSCD or SYNTHETIC.
    #[arg(long)]
    dataset: String,
    /// Folder holding the distributed splits (not used for SYNTHETIC).
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// SYNTHETIC only: samples per split and generator settings.
    #[arg(long, default_value_t = 64)]
    train: usize,
    #[arg(long, default_value_t = 0)]
    val: usize,
    #[arg(long, default_value_t = 16)]
    test: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    change_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum BackbonesCmd {
    /// Print every registered encoder and its weight source.
    List,
    /// Download and verify weights into the cache.
    Fetch {
        /// Specs such as `swin-tiny:cityscapes-sem`.
        specs: Vec<String>,
        /// Fetch every entry with a source.
        #[arg(long)]
        all: bool,
    },
}

#[derive(Args, Clone)]
struct ConfigSource {
    /// Shipped preset.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field override `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shrink a preset to a CPU-sized run on synthetic data.
    #[arg(long)]
    downscale: bool,
}

impl ConfigSource {
    fn label(&self) -> String {
        match (&self.preset, &self.config) {
            (Some(p), _) => p.clone(),
            (_, Some(c)) => c.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned()),
            _ => "baseline".into(),
        }
    }

    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match (&self.preset, &self.config) {
            (_, Some(path)) if self.downscale => {
                return Err(Error::InvalidArgument(format!(
                    "--downscale applies to presets, not {}",
                    path.display()
                )))
            }
            (_, Some(path)) => ExperimentConfig::load(path)?,
            (p, None) => {
                let name = p.as_deref().unwrap_or("baseline");
                if self.downscale {
                    presets::downscaled(name)?
                } else {
                    presets::preset(name)?
                }
            }
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Train on this dataset instead of the configured one.
    #[arg(long)]
    dataset: Option<String>,
    /// Canonical dataset folder; defaults to `data/<NAME>`.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    seeds: Option<Vec<u64>>,
    /// Output root; defaults to $BITEMPORAL_OUTPUT or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    matrix: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV table path; defaults to `<out>/ablation.csv`.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write `mean±std` cells.
    #[arg(long)]
    std: bool,
}

#[derive(Args)]
struct RunRef {
    /// Seed directory of a finished run, holding `checkpoint.safetensors`.
    #[arg(long)]
    run: PathBuf,
    /// Read the dataset from this folder instead of the configured one.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunRef,
    #[arg(long, default_value = "test")]
    split: String,
    /// Metrics file; defaults to `<run>/metrics_<split>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    source: ConfigSource,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    timed: usize,
    #[arg(long, default_value_t = benchmark::BENCH_SIZE)]
    size: usize,
    /// Output folder; defaults to `<output root>/benchmark`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    run: RunRef,
    #[arg(long, num_args = 1.., required = true)]
    samples: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Output roots or experiment folders to scan for `summary.json`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    std: bool,
}

fn parse_split(s: &str) -> Result<Split> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
    }
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let name: DatasetName = a.dataset.parse()?;
    let report = if name == DatasetName::Synthetic {
        let params = SyntheticSpec {
            train: a.train,
            val: a.val,
            test: a.test,
            change_ratio: a.change_ratio,
            seed: a.seed,
        };
        ingest_synthetic(&params, a.size, &a.out)?
    } else {
        let source = a
            .source
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument(format!("{name} needs --source")))?;
        ingest_directory(source, name, &a.out)?
    };
    for s in &report.splits {
        match s.expected {
            Some(e) if e != s.found => println!("{}: {} samples (expected {e})", s.split, s.found),
            _ => println!("{}: {} samples", s.split, s.found),
        }
    }
    println!("written to {}", report.out.display());
    Ok(())
}

fn backbones_cmd(cmd: &BackbonesCmd) -> Result<()> {
    match cmd {
        BackbonesCmd::List => {
            for e in backbones::manifest_entries() {
                match &e.source {
                    Some(s) => println!("{:<36} {}", e.spec.to_string(), s.identifier),
                    None => println!("{:<36} (random init)", e.spec.to_string()),
                }
            }
            Ok(())
        }
        BackbonesCmd::Fetch { specs, all } => {
            let entries: Vec<_> = if *all {
                backbones::manifest_entries().iter().collect()
            } else {
                if specs.is_empty() {
                    return Err(Error::InvalidArgument("name at least one backbone or pass --all".into()));
                }
                specs
                    .iter()
                    .map(|s| backbones::lookup(&BackboneSpec::parse(s)?))
                    .collect::<Result<_>>()?
            };
            for e in entries {
                if let Some(src) = &e.source {
                    let path = weights::fetch(src)?;
                    println!("{} -> {}", e.spec, path.display());
                }
            }
            Ok(())
        }
    }
}

fn train(a: &TrainArgs, device: &Device) -> Result<()> {
    let mut cfg = a.source.resolve()?;
    if let Some(d) = &a.dataset {
        let name: DatasetName = d.parse()?;
        if name == DatasetName::Synthetic {
            if cfg.dataset.name != DatasetName::Synthetic {
                cfg.dataset = presets::downscaled("baseline")?.dataset;
            }
        } else {
            let root = a.data_root.clone().unwrap_or_else(|| Path::new("data").join(name.as_str()));
            if cfg.dataset.name != name {
                cfg.epochs = cfg.epochs.min(name.default_epochs());
            }
            cfg.dataset = DatasetSpec::for_dataset(name, root);
        }
    } else if let Some(root) = &a.data_root {
        cfg.dataset.root_path = root.clone();
    }
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    let out = a.out.clone().unwrap_or_else(output_root);
    let mut report = run_experiment(&cfg, Some(&out), device)?;
    report.label = Some(a.source.label());
    report.write_summary()?;
    for o in &report.per_seed {
        match o {
            SeedOutcome::Completed(r) => println!("seed {}: F1 {:.4}", r.seed, r.test_metrics.f1),
            SeedOutcome::Failed { seed, error } => println!("seed {seed}: failed ({error})"),
        }
    }
    if let Some(agg) = &report.aggregate {
        let a = agg.f1_aggregate.as_ref().expect("aggregates carry member scores");
        println!("F1 {:.4} ± {:.4} over {} seed(s)", a.mean, a.std, a.values.len());
    }
    if let Some(dir) = &report.run_dir {
        println!("run directory: {}", dir.display());
    }
    if report.aggregate.is_none() {
        return Err(Error::RunFailed("no seed completed".into()));
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, device: &Device) -> Result<()> {
    let matrix = ablate::AblationMatrix::load(&a.matrix)?;
    let out = a.out.clone().unwrap_or_else(output_root);
    let table = ablate::run(&matrix, &out, device)?;
    let path = a.table.clone().unwrap_or_else(|| out.join("ablation.csv"));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    table.write_csv(file, a.std)?;
    table.write_csv(std::io::stdout(), a.std)?;
    println!("table written to {}", path.display());
    Ok(())
}

/// Loads a finished run: model, its experiment config and the samples of
/// `split`, preprocessed for the model.
fn open_run(r: &RunRef, split: Split, device: &Device) -> Result<(ChangeModel, ExperimentConfig, Vec<Sample>)> {
    let ck = if r.run.is_file() {
        r.run.clone()
    } else {
        r.run.join("checkpoint.safetensors")
    };
    if !ck.exists() {
        return Err(Error::NotFound(format!("checkpoint {}", ck.display())));
    }
    let (model, exp) = ChangeModel::load_checkpoint(&ck, device)?;
    let exp = exp.ok_or_else(|| Error::NotFound(format!("{} carries no experiment config", ck.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&exp)?;
    if let Some(root) = &r.data_root {
        cfg.dataset.root_path = root.clone();
    }
    let samples = load_dataset(&cfg.dataset, split)?
        .into_iter()
        .map(|s| preprocess(s, &cfg.dataset))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, cfg, samples))
}

fn evaluate(a: &EvaluateArgs, device: &Device) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (model, _, samples) = open_run(&a.run, split, device)?;
    let report = evaluate_model(&model, &samples, a.batch_size)?;
    let mut per_image = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(a.batch_size.max(1)) {
        let pairs: Vec<_> = chunk.iter().map(|s| &s.pair).collect();
        for (p, s) in model.predict(&pairs)?.iter().zip(chunk) {
            per_image.push(accumulate(ConfusionCounts::default(), &p.mask, &s.gt)?);
        }
    }
    print_metrics(&report);
    if let Ok(m) = per_image_mean_f1(&per_image) {
        println!("per-image mean F1 {m:.4} (diagnostic)");
    }
    let dir = if a.run.run.is_file() {
        a.run.run.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        a.run.run.clone()
    };
    let out = a.out.clone().unwrap_or_else(|| dir.join(format!("metrics_{split}.json")));
    report.write_json(&out)?;
    println!("metrics written to {}", out.display());
    Ok(())
}

fn print_metrics(r: &MetricsReport) {
    println!(
        "F1 {:.4}  precision {:.4}  recall {:.4}  (micro-averaged change class{})",
        r.f1,
        r.precision,
        r.recall,
        if r.zero_denominator_flag { ", no change present" } else { "" }
    );
    println!("mF1 {:.4}  (two-class mean, not comparable to F1)", r.mf1);
}

fn benchmark_cmd(a: &BenchmarkArgs, device: &Device) -> Result<()> {
    let cfg = a.source.resolve()?;
    let protocol = LatencyProtocol {
        warmup_passes: a.warmup,
        timed_passes: a.timed,
        repeats: a.repeats,
        size: a.size,
    };
    let report = benchmark::report_efficiency(&cfg, &protocol, device)?;
    let out = a.out.clone().unwrap_or_else(|| output_root().join("benchmark"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let stem = format!("{}-{}", a.source.label(), cfg.hash());
    report.write_json(&out.join(format!("{stem}.json")))?;
    let csv = out.join(format!("{stem}.csv"));
    benchmark::write_csv(std::fs::File::create(&csv).map_err(|e| Error::io(&csv, e))?, std::slice::from_ref(&report))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn visualize(a: &VisualizeArgs, device: &Device) -> Result<()> {
    let split = parse_split(&a.split)?;
    let (model, _, samples) = open_run(&a.run, split, device)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for id in &a.samples {
        let Some(s) = samples.iter().find(|s| s.id() == id) else {
            let ids: Vec<&str> = samples.iter().map(Sample::id).collect();
            let shown = ids.iter().take(20).copied().collect::<Vec<_>>().join(", ");
            let more = if ids.len() > 20 { format!(", ... ({} total)", ids.len()) } else { String::new() };
            return Err(Error::NotFound(format!("sample `{id}` in {split}; available: {shown}{more}")));
        };
        let pred = model.forward(&s.pair)?;
        let mut shown = s.pair.clone();
        shown.pre = denormalize(&s.pair.pre);
        shown.post = denormalize(&s.pair.post);
        let panel = render_panel(&shown, &pred.mask, &s.gt)?;
        let path = a.out.join(format!("{id}.png"));
        panel
            .save(&path)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let device = || select_device(cli.device.as_deref());
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Backbones(c) => backbones_cmd(c),
        Command::Train(a) => train(a, &device()?),
        Command::Ablate(a) => ablate_cmd(a, &device()?),
        Command::Evaluate(a) => evaluate(a, &device()?),
        Command::Benchmark(a) => benchmark_cmd(a, &device()?),
        Command::Visualize(a) => visualize(a, &device()?),
        Command::Report(a) => report::run(&a.runs, &a.out, a.std),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Validation => 2,
                ErrorClass::Environment => 3,
                ErrorClass::Runtime => 4,
            })
        }
    }
}
