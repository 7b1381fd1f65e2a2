//! Aggregation of seed-level metric rows into mean ± SEM tables and
//! long-format plot data.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::MetricsRecord;
use crate::tuning::mean_sem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: String,
    pub strategy: String,
    pub val_pct: f64,
    pub variant: String,
    pub split: String,
    pub ensemble_size: usize,
    pub n: usize,
    /// `n=1` when the SEM is undefined and reported as 0.
    pub flag: String,
    pub error_pct_mean: f64,
    pub error_pct_sem: f64,
    pub nll_mean: f64,
    pub nll_sem: f64,
    pub ece_mean: f64,
    pub ece_sem: f64,
    pub diversity_mean: f64,
    pub diversity_sem: f64,
    pub entropy_mean: f64,
    pub entropy_sem: f64,
    pub normalized_epochs_mean: Option<f64>,
    pub normalized_epochs_sem: Option<f64>,
}

/// One (group, metric) point for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub experiment: String,
    pub strategy: String,
    pub val_pct: f64,
    pub variant: String,
    pub split: String,
    pub ensemble_size: usize,
    pub metric: String,
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

fn group_cmp(a: &MetricsRecord, b: &MetricsRecord) -> Ordering {
    a.experiment
        .cmp(&b.experiment)
        .then_with(|| a.strategy.cmp(&b.strategy))
        .then_with(|| a.val_pct.total_cmp(&b.val_pct))
        .then_with(|| a.variant.cmp(&b.variant))
        .then_with(|| a.split.cmp(&b.split))
        .then_with(|| a.ensemble_size.cmp(&b.ensemble_size))
}

/// Groups rows by (experiment, strategy, val_pct, variant, split, size) and
/// reports each metric's mean and SEM, sorted by the group key.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRow> {
    let mut sorted: Vec<&MetricsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| group_cmp(a, b).then(a.seed.cmp(&b.seed)));
    let mut rows = Vec::new();
    for group in sorted.chunk_by(|a, b| group_cmp(a, b) == Ordering::Equal) {
        let stat = |f: &dyn Fn(&MetricsRecord) -> f64| mean_sem(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (error_pct_mean, error_pct_sem) = stat(&|r| r.error_pct);
        let (nll_mean, nll_sem) = stat(&|r| r.nll);
        let (ece_mean, ece_sem) = stat(&|r| r.ece);
        let (diversity_mean, diversity_sem) = stat(&|r| r.diversity);
        let (entropy_mean, entropy_sem) = stat(&|r| r.entropy);
        let epochs: Option<Vec<f64>> = group.iter().map(|r| r.normalized_epochs).collect();
        let (ne_mean, ne_sem) = match epochs {
            Some(v) if !v.is_empty() => {
                let (m, s) = mean_sem(&v);
                (Some(m), Some(s))
            }
            _ => (None, None),
        };
        let first = group[0];
        rows.push(AggregateRow {
            experiment: first.experiment.clone(),
            strategy: first.strategy.clone(),
            val_pct: first.val_pct,
            variant: first.variant.clone(),
            split: first.split.clone(),
            ensemble_size: first.ensemble_size,
            n: group.len(),
            flag: if group.len() == 1 { "n=1".into() } else { String::new() },
            error_pct_mean,
            error_pct_sem,
            nll_mean,
            nll_sem,
            ece_mean,
            ece_sem,
            diversity_mean,
            diversity_sem,
            entropy_mean,
            entropy_sem,
            normalized_epochs_mean: ne_mean,
            normalized_epochs_sem: ne_sem,
        });
    }
    rows
}

/// Long format: one row per aggregate row and metric.
pub fn plot_rows(rows: &[AggregateRow]) -> Vec<PlotRow> {
    let mut out = Vec::new();
    for r in rows {
        let mut metrics = vec![
            ("error_pct", r.error_pct_mean, r.error_pct_sem),
            ("nll", r.nll_mean, r.nll_sem),
            ("ece", r.ece_mean, r.ece_sem),
            ("diversity", r.diversity_mean, r.diversity_sem),
            ("entropy", r.entropy_mean, r.entropy_sem),
        ];
        if let (Some(m), Some(s)) = (r.normalized_epochs_mean, r.normalized_epochs_sem) {
            metrics.push(("normalized_epochs", m, s));
        }
        for (metric, mean, sem) in metrics {
            out.push(PlotRow {
                experiment: r.experiment.clone(),
                strategy: r.strategy.clone(),
                val_pct: r.val_pct,
                variant: r.variant.clone(),
                split: r.split.clone(),
                ensemble_size: r.ensemble_size,
                metric: metric.into(),
                mean,
                sem,
                n: r.n,
            });
        }
    }
    out
}

pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

const AGGREGATE_COLUMNS: [&str; 20] = [
    "experiment",
    "strategy",
    "val_pct",
    "variant",
    "split",
    "ensemble_size",
    "n",
    "flag",
    "error_pct_mean",
    "error_pct_sem",
    "nll_mean",
    "nll_sem",
    "ece_mean",
    "ece_sem",
    "diversity_mean",
    "diversity_sem",
    "entropy_mean",
    "entropy_sem",
    "normalized_epochs_mean",
    "normalized_epochs_sem",
];

const PLOT_COLUMNS: [&str; 10] =
    ["experiment", "strategy", "val_pct", "variant", "split", "ensemble_size", "metric", "mean", "sem", "n"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub aggregate: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Writes `aggregate.csv` and one `plot_<experiment>.csv` per experiment.
pub fn write_report(records: &[MetricsRecord], out_dir: &Path) -> Result<ReportFiles> {
    let rows = aggregate(records);
    let aggregate_path = out_dir.join("aggregate.csv");
    write_atomic(&aggregate_path, &to_csv(&rows, &AGGREGATE_COLUMNS)?)?;
    let mut plots = Vec::new();
    let all = plot_rows(&rows);
    for chunk in all.chunk_by(|a, b| a.experiment == b.experiment) {
        let path = out_dir.join(format!("plot_{}.csv", chunk[0].experiment));
        write_atomic(&path, &to_csv(chunk, &PLOT_COLUMNS)?)?;
        plots.push(path);
    }
    Ok(ReportFiles { aggregate: aggregate_path, plots })
}
