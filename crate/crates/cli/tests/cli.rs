use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set",
    "epochs=1",
    "--set",
    "batch_size=2",
    "--set",
    "dataset.patch_size=32",
    "--set",
    "dataset.synthetic.train=4",
    "--set",
    "dataset.synthetic.test=2",
];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitemporal"))
        .args(args)
        .env("BITEMPORAL_OFFLINE", "1")
        .env_remove("BITEMPORAL_DEVICE")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--preset", "baseline", "--downscale", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    bin(&args)
}

fn only_child(dir: &Path) -> std::path::PathBuf {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(v.len(), 1, "{v:?}");
    v.pop().unwrap()
}

#[test]
fn lists_backbones() {
    let o = bin(&["backbones", "list"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("swin-tiny:cityscapes-sem"), "{s}");
    assert!(s.contains("(random init)"));
}

#[test]
fn exit_codes_by_failure_class() {
    let o = bin(&["train", "--preset", "btc-b", "--set", "freeze_backbone=true"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("freeze_backbone"));
    let o = bin(&["--device", "cuda:0", "benchmark", "--preset", "btc-t"]);
    assert_eq!(o.status.code(), Some(3));
    let o = bin(&["train", "--preset", "no-such-preset"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["evaluate", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ingest_synthetic_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&[
        "ingest", "--dataset", "synthetic", "--out", dir.path().to_str().unwrap(), "--train", "5", "--test", "3",
        "--size", "32",
    ]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("train: 5 samples") && s.contains("test: 3 samples"), "{s}");
    assert_eq!(std::fs::read_dir(dir.path().join("train/A")).unwrap().count(), 5);
}

#[test]
fn train_evaluate_visualize_report() {
    let out = tempfile::tempdir().unwrap();
    let o = train_tiny(out.path(), &["--set", "scheduler.kind=cosine", "--seeds", "0", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("seed 0: F1") && s.contains("seed 1: F1") && s.contains("over 2 seed(s)"), "{s}");

    // stored config is the effective one and hashes to its folder name
    let run = only_child(out.path());
    let text = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(text.contains("kind = \"cosine\""));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], run.file_name().unwrap().to_str().unwrap());
    assert_eq!(summary["label"], "baseline");
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 2);

    let seed_dir = run.join("0");
    let o = bin(&["evaluate", "--run", seed_dir.to_str().unwrap(), "--batch-size", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("not comparable"));
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seed_dir.join("metrics.json")).unwrap()).unwrap();
    let fresh: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seed_dir.join("metrics_test.json")).unwrap()).unwrap();
    assert_eq!(stored, fresh);

    let figs = out.path().join("figs");
    let o = bin(&[
        "visualize", "--run", seed_dir.to_str().unwrap(), "--samples", "syn_00001", "--out",
        figs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let png = std::fs::read(figs.join("syn_00001.png")).unwrap();
    // IHDR width and height
    let w = u32::from_be_bytes(png[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(png[20..24].try_into().unwrap());
    assert_eq!((w, h), (4 * 32, 32));
    let o = bin(&["visualize", "--run", seed_dir.to_str().unwrap(), "--samples", "nope", "--out", figs.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("syn_00000") && err.contains("syn_00001"), "{err}");

    let table = out.path().join("table.csv");
    let o = bin(&["report", out.path().to_str().unwrap(), "--out", table.to_str().unwrap(), "--std"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    assert!(csv.starts_with("config,SYNTHETIC,Avg"), "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("baseline,"));
}

#[test]
fn ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.toml");
    let set: Vec<String> = TINY.chunks(2).map(|c| format!("\"{}\"", c[1])).collect();
    std::fs::write(
        &m,
        format!(
            "base = \"baseline\"\ndownscale = true\nset = [{}]\n[axis]\nkey = \"loss.kind\"\nvalues = [\"ce\", \"hinge\", \"dice\"]\n",
            set.join(", ")
        ),
    )
    .unwrap();
    let out = dir.path().join("runs");
    let o = bin(&["ablate", m.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4, "{csv}");
    assert!(lines[2].starts_with("hinge,failed,failed"));
    assert!(lines[1].starts_with("ce,") && lines[3].starts_with("dice,"));

    std::fs::write(&m, "base = \"baseline\"\n[axis]\nkey = \"loss.kind\"\nvalues = []\n").unwrap();
    let o = bin(&["ablate", m.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn benchmark_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&[
        "benchmark", "--preset", "btc-t", "--downscale", "--warmup", "1", "--timed", "2", "--repeats", "2", "--size",
        "64", "--out", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let ms = v["inference_ms_mean"].as_f64().unwrap();
    assert_eq!(v["fps"].as_f64().unwrap(), 1000.0 / ms);
    assert_eq!(v["precision_mode"], "float16");
    assert_eq!(v["latency"]["runtime_samples_ms"].as_array().unwrap().len(), 2);
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(files.len(), 2);
}
