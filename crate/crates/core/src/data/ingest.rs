//! Conversion of distributed dataset folders into the canonical
//! `<root>/<split>/{A,B,label}/<id>.png` layout.
//!
//! Distributions disagree on folder names, so each role accepts a few
//! aliases. Every sample is decoded, checked and re-encoded, which turns
//! truncated or mismatched members into errors naming the file.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::dataset::{load_dataset, write_sample, DatasetName, DatasetSpec, SyntheticSpec};
use super::Split;
use crate::error::{Error, Result};

const PRE_DIRS: [&str; 5] = ["A", "time1", "im1", "pre", "T1"];
const POST_DIRS: [&str; 5] = ["B", "time2", "im2", "post", "T2"];
const LABEL_DIRS: [&str; 6] = ["label", "OUT", "gt", "mask", "labels", "cm"];

fn split_dir_names(split: Split) -> &'static [&'static str] {
    match split {
        Split::Train => &["train", "training"],
        Split::Val => &["val", "validation"],
        Split::Test => &["test", "testing"],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitIngest {
    pub split: Split,
    pub found: usize,
    pub expected: Option<usize>,
}

impl SplitIngest {
    pub fn matches(&self) -> bool {
        self.expected.is_none_or(|e| e == self.found)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub dataset: DatasetName,
    pub out: PathBuf,
    pub splits: Vec<SplitIngest>,
}

impl IngestReport {
    /// Splits whose counts differ from the public distribution.
    pub fn mismatches(&self) -> impl Iterator<Item = &SplitIngest> {
        self.splits.iter().filter(|s| !s.matches())
    }
}

fn find_child(dir: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| dir.join(n)).find(|p| p.is_dir())
}

fn expected(dataset: DatasetName, split: Split) -> Option<usize> {
    dataset.expected_counts().and_then(|c| c.get(split))
}

/// Rewrites the folder distribution at `source` into canonical form under
/// `out`. Count mismatches are reported, not fatal.
pub fn ingest_directory(source: &Path, dataset: DatasetName, out: &Path) -> Result<IngestReport> {
    if !source.is_dir() {
        return Err(Error::DatasetNotFound(source.to_owned()));
    }
    let patch = dataset.patch_size();
    let mut splits = Vec::new();
    for split in Split::ALL {
        if !dataset.has_split(split) {
            continue;
        }
        let Some(dir) = find_child(source, split_dir_names(split)) else {
            splits.push(SplitIngest {
                split,
                found: 0,
                expected: expected(dataset, split),
            });
            continue;
        };
        let role = |names: &[&str], what: &str| {
            find_child(&dir, names).ok_or_else(|| {
                Error::CorruptSample {
                    sample_id: dir.display().to_string(),
                    reason: format!("no {what} folder (tried {})", names.join(", ")),
                }
            })
        };
        let (a, b, l) = (role(&PRE_DIRS, "pre")?, role(&POST_DIRS, "post")?, role(&LABEL_DIRS, "label")?);
        // stage the split under canonical names so the regular loader can
        // decode and validate it
        let staging = tempdir_in(out)?;
        let split_stage = staging.join(split.as_str());
        let mut ids = Vec::new();
        for (src, dst) in [(&a, "A"), (&b, "B"), (&l, "label")] {
            let dst_dir = split_stage.join(dst);
            std::fs::create_dir_all(&dst_dir).map_err(|e| Error::io(&dst_dir, e))?;
            for entry in std::fs::read_dir(src).map_err(|e| Error::io(src, e))? {
                let path = entry.map_err(|e| Error::io(src, e))?.path();
                if path.extension().and_then(|e| e.to_str()) != Some("png") {
                    continue;
                }
                let name = path.file_name().expect("read_dir entries have names");
                link_or_copy(&path, &dst_dir.join(name))?;
                if dst == "A" {
                    ids.push(name.to_owned());
                }
            }
        }
        for id in &ids {
            for role in ["B", "label"] {
                if !split_stage.join(role).join(id).exists() {
                    return Err(Error::CorruptSample {
                        sample_id: id.to_string_lossy().into_owned(),
                        reason: format!("missing {role} member"),
                    });
                }
            }
        }
        let spec = DatasetSpec {
            name: dataset,
            root_path: staging.clone(),
            patch_size: patch,
            resize_to: None,
            synthetic: None,
        };
        let samples = load_dataset(&spec, split);
        let _ = std::fs::remove_dir_all(&staging);
        let samples = samples?;
        samples.par_iter().try_for_each(|s| write_sample(out, s))?;
        splits.push(SplitIngest {
            split,
            found: samples.len(),
            expected: expected(dataset, split),
        });
    }
    let report = IngestReport {
        dataset,
        out: out.to_owned(),
        splits,
    };
    for m in report.mismatches() {
        log::warn!(
            "{dataset} {}: expected {} samples, found {}",
            m.split,
            m.expected.unwrap_or_default(),
            m.found
        );
    }
    Ok(report)
}

fn tempdir_in(out: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dir = out.join(format!(".ingest-{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn link_or_copy(from: &Path, to: &Path) -> Result<()> {
    if std::fs::hard_link(from, to).is_ok() {
        return Ok(());
    }
    std::fs::copy(from, to).map(|_| ()).map_err(|e| Error::io(from, e))
}

/// Writes a generated dataset in canonical form.
pub fn ingest_synthetic(params: &SyntheticSpec, size: usize, out: &Path) -> Result<IngestReport> {
    let spec = DatasetSpec::synthetic(size, params.clone());
    spec.validate()?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let samples = load_dataset(&spec, split)?;
        samples.par_iter().try_for_each(|s| write_sample(out, s))?;
        let requested = match split {
            Split::Train => params.train,
            Split::Val => params.val,
            Split::Test => params.test,
        };
        splits.push(SplitIngest {
            split,
            found: samples.len(),
            expected: Some(requested),
        });
    }
    Ok(IngestReport {
        dataset: DatasetName::Synthetic,
        out: out.to_owned(),
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SyntheticSpec {
        SyntheticSpec {
            train: 3,
            val: 1,
            test: 2,
            change_ratio: 0.1,
            seed: 4,
        }
    }

    #[test]
    fn synthetic_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let rep = ingest_synthetic(&params(), 32, dir.path()).unwrap();
        assert!(rep.mismatches().next().is_none());
        assert_eq!(rep.splits.iter().map(|s| s.found).collect::<Vec<_>>(), [3, 1, 2]);
        let mut disk = DatasetSpec::synthetic(32, params());
        disk.synthetic = None;
        disk.root_path = dir.path().to_owned();
        let from_disk = load_dataset(&disk, Split::Train).unwrap();
        let generated = load_dataset(&DatasetSpec::synthetic(32, params()), Split::Train).unwrap();
        assert_eq!(from_disk, generated);
    }

    #[test]
    fn aliased_layout_is_canonicalized() {
        let src = tempfile::tempdir().unwrap();
        let canon = tempfile::tempdir().unwrap();
        ingest_synthetic(&params(), 256, canon.path()).unwrap();
        // rename into a time1/time2/label distribution
        for (split, alias) in [("train", "train"), ("val", "val"), ("test", "test")] {
            for (from, to) in [("A", "time1"), ("B", "time2"), ("label", "label")] {
                let d = src.path().join(alias).join(to);
                std::fs::create_dir_all(&d).unwrap();
                for e in std::fs::read_dir(canon.path().join(split).join(from)).unwrap() {
                    let p = e.unwrap().path();
                    std::fs::copy(&p, d.join(p.file_name().unwrap())).unwrap();
                }
            }
        }
        let out = tempfile::tempdir().unwrap();
        let rep = ingest_directory(src.path(), DatasetName::Clcd, out.path()).unwrap();
        assert_eq!(rep.splits[0].found, 3);
        assert_eq!(rep.mismatches().count(), 3);
        assert!(out.path().join("train/label/syn_00000.png").exists());
    }

    #[test]
    fn corrupt_member_is_named() {
        let src = tempfile::tempdir().unwrap();
        for role in ["A", "B", "label"] {
            let d = src.path().join("train").join(role);
            std::fs::create_dir_all(&d).unwrap();
            std::fs::write(d.join("x1.png"), b"not a png").unwrap();
        }
        let out = tempfile::tempdir().unwrap();
        let err = ingest_directory(src.path(), DatasetName::Levir, out.path()).unwrap_err();
        assert!(err.to_string().contains("x1.png"), "{err}");
    }
}
