use std::path::{Path, PathBuf};

use serde::Serialize;

use super::sweep::{AlphaSweep, SweepResult};
use crate::error::{Error, Result};
use crate::pruning::Criterion;
use crate::scoring::ScoreTable;

/// Mean over seeds for one `(criterion, ratio)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub criterion: Criterion,
    pub ratio: f64,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub mean_stability: f64,
    pub mean_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub cells: Vec<CellSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<SeedAlpha>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedAlpha {
    pub seed: u64,
    pub sweep: AlphaSweep,
}

pub fn summarize(result: &SweepResult) -> Vec<CellSummary> {
    let mut keys: Vec<(Criterion, f64)> = Vec::new();
    for r in &result.rows {
        if !keys.iter().any(|(c, x)| *c == r.criterion && *x == r.ratio) {
            keys.push((r.criterion, r.ratio));
        }
    }
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.into_iter()
        .map(|(criterion, ratio)| {
            let cell: Vec<_> = result
                .rows
                .iter()
                .filter(|r| r.criterion == criterion && r.ratio == ratio)
                .collect();
            let n = cell.len() as f64;
            CellSummary {
                criterion,
                ratio,
                seeds: cell.len(),
                mean_accuracy: cell.iter().map(|r| r.accuracy).sum::<f64>() / n,
                mean_stability: cell.iter().map(|r| r.stability).sum::<f64>() / n,
                mean_risk: cell.iter().map(|r| r.risk).sum::<f64>() / n,
            }
        })
        .collect()
}

/// `criterion,ratio,seed,accuracy,stability,risk,k`, one line per row.
pub fn curves_csv(result: &SweepResult) -> String {
    let mut out = String::from("criterion,ratio,seed,accuracy,stability,risk,k\n");
    for r in &result.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.criterion,
            r.ratio,
            r.seed,
            r.accuracy,
            r.stability,
            r.risk,
            r.mask.k()
        ));
    }
    out
}

pub fn mask_file_name(criterion: Criterion, ratio: f64, seed: u64) -> String {
    format!("mask_{criterion}_r{ratio:.4}_s{seed}.csv")
}

/// Writes `curves.csv`, one mask heatmap per row, `summary.json`, and one
/// heatmap per score metric for each supplied table.
pub fn export_reports(
    result: &SweepResult,
    alpha: &[SeedAlpha],
    scores: &[(u64, &ScoreTable)],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if result.rows.is_empty() {
        return Err(Error::Input("nothing to export".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut write = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    write("curves.csv".into(), curves_csv(result))?;
    for r in &result.rows {
        write(mask_file_name(r.criterion, r.ratio, r.seed), r.mask.heatmap_csv())?;
    }
    for (seed, table) in scores {
        for metric in crate::scoring::Metric::ALL {
            write(format!("heatmap_{}_s{seed}.csv", metric.name()), table.heatmap_csv(metric))?;
        }
    }
    let summary = Summary {
        cells: summarize(result),
        alpha: alpha.to_vec(),
    };
    write("summary.json".into(), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(written)
}
