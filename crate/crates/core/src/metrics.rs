//! Scores for probabilistic classifiers and ensembles.
//!
//! All logs are natural (nats). Probabilities are floored at
//! [`PROB_FLOOR`] before taking logs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{argmax, check_labels, softmax_rows, Matrix};

pub const PROB_FLOOR: f64 = 1e-300;
pub const DEFAULT_ECE_BINS: usize = 15;

/// Tolerance on row sums accepted by [`ProbMatrix::new`].
const ROW_SUM_TOL: f64 = 1e-9;

/// `N × K` class probabilities; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid(format!("row {i} has an entry outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    /// Softmax of logits.
    pub fn from_logits(z: &Matrix) -> Self {
        Self(softmax_rows(z))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn select_rows(&self, idx: &[usize]) -> ProbMatrix {
        ProbMatrix(self.0.select_rows(idx))
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        self.0.argmax_rows()
    }
}

fn check_same_shape(members: &[ProbMatrix]) -> Result<(usize, usize)> {
    let first = members
        .first()
        .ok_or_else(|| Error::invalid("at least one ensemble member is required"))?;
    let (n, k) = (first.rows(), first.classes());
    for (m, p) in members.iter().enumerate() {
        if p.rows() != n {
            return Err(Error::dims(format!("member {m} rows"), n, p.rows()));
        }
        if p.classes() != k {
            return Err(Error::dims(format!("member {m} classes"), k, p.classes()));
        }
    }
    Ok((n, k))
}

/// Arithmetic mean of member probabilities.
pub fn ensemble_mean(members: &[ProbMatrix]) -> Result<ProbMatrix> {
    let (n, k) = check_same_shape(members)?;
    let mut out = Matrix::zeros(n, k);
    for p in members {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(p.0.as_slice()) {
            *o += v;
        }
    }
    let scale = 1.0 / members.len() as f64;
    for o in out.as_mut_slice() {
        *o *= scale;
    }
    Ok(ProbMatrix(out))
}

#[inline]
fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Per-sample `−ln p[i, y_i]`.
pub fn nll_per_sample(p: &ProbMatrix, y: &[usize]) -> Result<Vec<f64>> {
    check_labels(y, p.rows(), p.classes())?;
    Ok(y.iter().enumerate().map(|(i, &c)| -safe_ln(p.row(i)[c])).collect())
}

/// Mean negative log-likelihood.
pub fn nll(p: &ProbMatrix, y: &[usize]) -> Result<f64> {
    let per = nll_per_sample(p, y)?;
    if per.is_empty() {
        return Err(Error::invalid("nll of an empty set"));
    }
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Percentage of rows whose argmax (lowest index on ties) is not the label.
pub fn classification_error(p: &ProbMatrix, y: &[usize]) -> Result<f64> {
    check_labels(y, p.rows(), p.classes())?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let wrong = p
        .0
        .iter_rows()
        .zip(y)
        .filter(|(row, &c)| argmax(row) != c)
        .count();
    Ok(100.0 * wrong as f64 / y.len() as f64)
}

/// Expected calibration error with `n_bins` equal-width bins `(lo, hi]` on
/// the max-probability confidence.
pub fn ece(p: &ProbMatrix, y: &[usize], n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::invalid("ece needs at least one bin"));
    }
    check_labels(y, p.rows(), p.classes())?;
    let n = y.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (row, &label) in p.0.iter_rows().zip(y) {
        let pred = argmax(row);
        let conf = row[pred];
        let b = ((conf * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == label {
            correct[b] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let c = count[b] as f64;
        total += (c / n as f64) * (correct[b] as f64 / c - conf_sum[b] / c).abs();
    }
    Ok(total)
}

/// Shannon entropy of one distribution, with `0·ln 0 = 0`.
pub fn entropy_row(row: &[f64]) -> f64 {
    -row.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerSample {
    pub values: Vec<f64>,
    pub mean: f64,
}

impl PerSample {
    fn from_values(values: Vec<f64>) -> Self {
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self { values, mean }
    }
}

/// Per-row entropy and its mean.
pub fn entropy(p: &ProbMatrix) -> PerSample {
    PerSample::from_values(p.0.iter_rows().map(entropy_row).collect())
}

/// `H(mean) − mean_m H(member)`, per sample.
pub fn diversity(members: &[ProbMatrix]) -> Result<PerSample> {
    let mean = ensemble_mean(members)?;
    let m = members.len() as f64;
    let values = (0..mean.rows())
        .map(|i| {
            let avg_member: f64 = members.iter().map(|p| entropy_row(p.row(i))).sum::<f64>() / m;
            entropy_row(mean.row(i)) - avg_member
        })
        .collect();
    Ok(PerSample::from_values(values))
}

/// `KL(p ‖ q)` with `0·ln(0/q) = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - safe_ln(b)))
        .sum()
}

/// Diversity computed as the average KL divergence from each member to the mean.
pub fn diversity_kl(members: &[ProbMatrix]) -> Result<PerSample> {
    let mean = ensemble_mean(members)?;
    let m = members.len() as f64;
    let values = (0..mean.rows())
        .map(|i| members.iter().map(|p| kl_divergence(p.row(i), mean.row(i))).sum::<f64>() / m)
        .collect();
    Ok(PerSample::from_values(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Ambiguity {
    pub ensemble_nll: f64,
    pub avg_member_nll: f64,
    /// `avg_member_nll − ensemble_nll`.
    pub ambiguity: f64,
}

/// Splits the average member NLL into ensemble NLL plus a non-negative ambiguity.
pub fn ambiguity(members: &[ProbMatrix], y: &[usize]) -> Result<Ambiguity> {
    let mean = ensemble_mean(members)?;
    let ensemble_nll = nll(&mean, y)?;
    let mut total = 0.0;
    for p in members {
        total += nll(p, y)?;
    }
    let avg_member_nll = total / members.len() as f64;
    Ok(Ambiguity {
        ensemble_nll,
        avg_member_nll,
        ambiguity: avg_member_nll - ensemble_nll,
    })
}

/// Descriptive tags for a [`MetricsRecord`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordTags {
    pub strategy: String,
    pub val_pct: f64,
    pub seed: u64,
    pub ensemble_size: usize,
    pub experiment: String,
    pub variant: String,
    pub split: String,
}

/// One evaluation row.
///
/// The CSV column order is fixed: the ten metric/tag columns first, then
/// `experiment`, `variant`, and `split` to tell rows of different
/// experiment arms apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: String,
    pub val_pct: f64,
    pub seed: u64,
    pub ensemble_size: usize,
    pub error_pct: f64,
    pub nll: f64,
    pub ece: f64,
    pub diversity: f64,
    pub entropy: f64,
    pub normalized_epochs: Option<f64>,
    pub experiment: String,
    pub variant: String,
    pub split: String,
}

pub const RECORD_COLUMNS: [&str; 13] = [
    "strategy",
    "val_pct",
    "seed",
    "ensemble_size",
    "error_pct",
    "nll",
    "ece",
    "diversity",
    "entropy",
    "normalized_epochs",
    "experiment",
    "variant",
    "split",
];

impl MetricsRecord {
    /// Scores the ensemble formed by `members`.
    ///
    /// `combined` overrides the plain mean as the ensemble prediction (used by
    /// temperature-scaled or pooled predictors); diversity is always measured
    /// on `members`.
    pub fn evaluate(
        members: &[ProbMatrix],
        combined: Option<&ProbMatrix>,
        y: &[usize],
        tags: RecordTags,
        normalized_epochs: Option<f64>,
    ) -> Result<Self> {
        let mean;
        let pred = match combined {
            Some(p) => p,
            None => {
                mean = ensemble_mean(members)?;
                &mean
            }
        };
        Ok(Self {
            strategy: tags.strategy,
            val_pct: tags.val_pct,
            seed: tags.seed,
            ensemble_size: tags.ensemble_size,
            error_pct: classification_error(pred, y)?,
            nll: nll(pred, y)?,
            ece: ece(pred, y, DEFAULT_ECE_BINS)?,
            diversity: diversity(members)?.mean.max(0.0),
            entropy: entropy(pred).mean,
            normalized_epochs,
            experiment: tags.experiment,
            variant: tags.variant,
            split: tags.split,
        })
    }
}

pub fn write_records_csv<W: std::io::Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_records_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(RECORD_COLUMNS.iter().copied()) {
        return Err(Error::invalid(format!("unexpected metrics CSV header {headers:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
