//! Single-axis ablation matrices.
//!
//! A matrix names a base configuration and one field to vary. Every value
//! of that field becomes a table row, every listed dataset a column:
//!
//! ```toml
//! base = "baseline"
//! datasets = ["LEVIR", "CLCD"]
//!
//! [axis]
//! key = "scheduler.kind"
//! values = ["none", "multistep", "cosine"]
//! ```

use std::path::{Path, PathBuf};

use bitemporal::config::ExperimentConfig;
use bitemporal::data::{DatasetName, DatasetSpec};
use bitemporal::evaluation::{SummaryRow, SummaryTable};
use bitemporal::presets;
use bitemporal::trainer::run_experiment;
use bitemporal::{Device, Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
    /// Row names; defaults to the values themselves.
    #[serde(default)]
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    /// Preset name or path to a config file.
    pub base: String,
    /// Shrink a preset base to its CPU-sized counterpart.
    #[serde(default)]
    pub downscale: bool,
    /// Overrides applied to the base before the axis.
    #[serde(default)]
    pub set: Vec<String>,
    /// Table columns; the base dataset when empty.
    #[serde(default)]
    pub datasets: Vec<String>,
    /// Parent folder of the canonical dataset folders.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    pub axis: Axis,
}

/// One cell to run, or the reason it cannot run.
pub struct Cell {
    pub column: String,
    pub config: Result<ExperimentConfig>,
}

pub struct Variant {
    pub label: String,
    pub cells: Vec<Cell>,
}

fn literal(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl AblationMatrix {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::InvalidMatrix(format!("{origin}: {}", e.message())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn validate(&self) -> Result<()> {
        if self.axis.key.trim().is_empty() {
            return Err(Error::InvalidMatrix("axis.key is empty".into()));
        }
        if self.axis.values.is_empty() {
            return Err(Error::InvalidMatrix(format!("axis `{}` has no values", self.axis.key)));
        }
        if !self.axis.labels.is_empty() && self.axis.labels.len() != self.axis.values.len() {
            return Err(Error::InvalidMatrix(format!(
                "{} labels for {} values",
                self.axis.labels.len(),
                self.axis.values.len()
            )));
        }
        Ok(())
    }

    fn base_config(&self) -> Result<ExperimentConfig> {
        let base = if presets::PRESET_NAMES.contains(&self.base.as_str()) {
            if self.downscale {
                presets::downscaled(&self.base)?
            } else {
                presets::preset(&self.base)?
            }
        } else {
            if self.downscale {
                return Err(Error::InvalidMatrix("downscale applies to preset bases only".into()));
            }
            ExperimentConfig::load(Path::new(&self.base))?
        };
        base.with_overrides(&self.set)
    }

    fn column_config(&self, base: &ExperimentConfig, column: &str) -> Result<ExperimentConfig> {
        let name: DatasetName = column.parse()?;
        if name == base.dataset.name && (self.data_root.is_none() || name == DatasetName::Synthetic) {
            return Ok(base.clone());
        }
        if name == DatasetName::Synthetic {
            return Err(Error::InvalidMatrix("a SYNTHETIC column needs a synthetic base".into()));
        }
        let mut c = base.clone();
        let root = self.data_root.clone().unwrap_or_else(|| "data".into());
        c.dataset = DatasetSpec::for_dataset(name, root.join(name.as_str()));
        c.epochs = c.epochs.min(name.default_epochs());
        c.validate()?;
        Ok(c)
    }

    /// Column names in table order.
    pub fn columns(&self) -> Result<Vec<String>> {
        if self.datasets.is_empty() {
            Ok(vec![self.base_config()?.dataset.name.to_string()])
        } else {
            Ok(self.datasets.clone())
        }
    }

    /// Every (row, column) configuration. A value that does not validate
    /// fails its own cells only.
    pub fn expand(&self) -> Result<Vec<Variant>> {
        let base = self.base_config()?;
        let columns = self.columns()?;
        Ok(self
            .axis
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let value = literal(v);
                let label = self.axis.labels.get(i).cloned().unwrap_or_else(|| value.clone());
                let variant = base.with_overrides(&[format!("{}={}", self.axis.key, v)]);
                let cells = columns
                    .iter()
                    .map(|col| Cell {
                        column: col.clone(),
                        config: match &variant {
                            Ok(c) => self.column_config(c, col),
                            Err(e) => Err(Error::InvalidMatrix(format!("{} = {value}: {e}", self.axis.key))),
                        },
                    })
                    .collect();
                Variant { label, cells }
            })
            .collect())
    }
}

/// Runs every cell, isolating failures, and returns the results table.
pub fn run(matrix: &AblationMatrix, out_root: &Path, device: &Device) -> Result<SummaryTable> {
    let columns = matrix.columns()?;
    let mut rows = Vec::new();
    for variant in matrix.expand()? {
        let mut cells = Vec::new();
        for cell in variant.cells {
            let outcome = cell.config.and_then(|c| {
                let mut report = run_experiment(&c, Some(out_root), device)?;
                report.label = Some(format!("{}={}", matrix.axis.key, variant.label));
                report.write_summary()?;
                Ok(report)
            });
            cells.push(match outcome {
                Ok(report) => {
                    if let Some(a) = &report.aggregate {
                        log::info!("{} / {}: F1 {:.4}", variant.label, cell.column, a.f1);
                    }
                    report.aggregate
                }
                Err(e) => {
                    log::error!("{} / {} failed: {e}", variant.label, cell.column);
                    None
                }
            });
        }
        rows.push(SummaryRow {
            label: variant.label,
            cells,
        });
    }
    Ok(SummaryTable { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(axis: &str) -> String {
        format!("base = \"baseline\"\ndownscale = true\n[axis]\n{axis}\n")
    }

    #[test]
    fn empty_axis_rejected() {
        let e = AblationMatrix::parse(&matrix("key = \"loss.kind\"\nvalues = []"), "m").unwrap_err();
        assert!(matches!(e, Error::InvalidMatrix(_)));
    }

    #[test]
    fn scheduler_and_loss_axes() {
        let m = AblationMatrix::parse(
            &matrix(r#"key = "scheduler.kind"
values = ["none", "multistep", "cosine", "exponential", "linear", "polynomial"]"#),
            "m",
        )
        .unwrap();
        let v = m.expand().unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.iter().all(|r| r.cells.len() == 1 && r.cells[0].config.is_ok()));
        let m = AblationMatrix::parse(
            &matrix(r#"key = "loss.kind"
values = ["ce", "focal", "dice", "focal+dice", "ce+dice"]"#),
            "m",
        )
        .unwrap();
        let v = m.expand().unwrap();
        assert_eq!(v.len(), 5);
        let kinds: Vec<_> = v.iter().map(|r| r.cells[0].config.as_ref().unwrap().loss.kind.as_str()).collect();
        assert_eq!(kinds, ["ce", "focal", "dice", "focal+dice", "ce+dice"]);
    }

    #[test]
    fn bad_value_fails_only_its_row() {
        let m = AblationMatrix::parse(
            &matrix("key = \"loss.kind\"\nvalues = [\"ce\", \"hinge\"]"),
            "m",
        )
        .unwrap();
        let v = m.expand().unwrap();
        assert!(v[0].cells[0].config.is_ok());
        assert!(v[1].cells[0].config.is_err());
    }

    #[test]
    fn shipped_matrix_expands() {
        let m = AblationMatrix::parse(include_str!("../../../configs/ablation-scheduler.toml"), "shipped").unwrap();
        assert_eq!(m.columns().unwrap(), ["LEVIR", "CLCD"]);
        let v = m.expand().unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.iter().flat_map(|r| &r.cells).all(|c| c.config.is_ok()));
    }

    #[test]
    fn dataset_columns() {
        let text = "base = \"baseline\"\ndatasets = [\"LEVIR\", \"OSCD\"]\ndata_root = \"/d\"\n[axis]\nkey = \"epochs\"\nvalues = [100]\n";
        let m = AblationMatrix::parse(text, "m").unwrap();
        let v = m.expand().unwrap();
        let oscd = v[0].cells[1].config.as_ref().unwrap();
        assert_eq!(oscd.epochs, 50);
        assert_eq!(oscd.dataset.root_path, Path::new("/d/OSCD"));
    }
}
