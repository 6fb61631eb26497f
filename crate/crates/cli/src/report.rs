//! Results tables from finished runs: one row per labelled configuration,
//! one column per dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bitemporal::config::ExperimentConfig;
use bitemporal::data::DatasetName;
use bitemporal::evaluation::{MetricsReport, SummaryRow, SummaryTable};
use bitemporal::trainer::ExperimentReport;
use bitemporal::{Error, Result};

/// `summary.json` files at most two levels below each root.
fn find_summaries(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for root in roots {
        let direct = root.join("summary.json");
        if direct.is_file() {
            out.push(direct);
            continue;
        }
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(root, e))?.path().join("summary.json");
            if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn column_rank(name: &str) -> (usize, String) {
    let known = [
        DatasetName::Sysu,
        DatasetName::Levir,
        DatasetName::Egybcd,
        DatasetName::Gvlm,
        DatasetName::Clcd,
        DatasetName::Oscd,
    ];
    let rank = known.iter().position(|d| d.as_str() == name).unwrap_or(known.len());
    (rank, name.to_string())
}

/// Builds the table; later runs of the same (row, column) replace earlier
/// ones.
pub fn collect(roots: &[PathBuf]) -> Result<SummaryTable> {
    let mut cells: BTreeMap<(String, String), Option<MetricsReport>> = BTreeMap::new();
    let mut row_order: Vec<String> = Vec::new();
    for path in find_summaries(roots)? {
        let report = ExperimentReport::read_summary(&path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
        let row = report.label.clone().unwrap_or_else(|| report.config_hash.clone());
        if !row_order.contains(&row) {
            row_order.push(row.clone());
        }
        cells.insert((row, cfg.dataset.name.to_string()), report.aggregate);
    }
    if cells.is_empty() {
        return Err(Error::NotFound("no summary.json under the given folders".into()));
    }
    let mut columns: Vec<String> = cells.keys().map(|(_, c)| c.clone()).collect();
    columns.sort_by_key(|c| column_rank(c));
    columns.dedup();
    let rows = row_order
        .into_iter()
        .map(|label| SummaryRow {
            cells: columns
                .iter()
                .map(|c| cells.get(&(label.clone(), c.clone())).cloned().flatten())
                .collect(),
            label,
        })
        .collect();
    Ok(SummaryTable { columns, rows })
}

pub fn run(roots: &[PathBuf], out: &Path, with_std: bool) -> Result<()> {
    let table = collect(roots)?;
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    table.write_csv(file, with_std)?;
    table.write_csv(std::io::stdout(), with_std)?;
    Ok(())
}
