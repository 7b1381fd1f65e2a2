//! Datasets: synthetic generators, CSV ingestion, test split and per-member
//! feature standardization.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::Matrix;
use crate::rng::Rng;
use crate::splits::stratified_order;

pub const TEST_FRACTION: f64 = 0.2;

fn default_radius() -> f64 {
    3.0
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// `classes` isotropic Gaussian clusters with means equally spaced on a
    /// circle of `radius`; each label is replaced by a different random
    /// class with probability `label_noise`. `noise_dims` appends that many
    /// standard-normal features carrying no class signal.
    Blobs {
        classes: usize,
        n: usize,
        noise: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        label_noise: f64,
        #[serde(default)]
        noise_dims: usize,
    },
    /// Two interleaved spiral arms.
    Spirals { n: usize, noise: f64 },
    /// A headered CSV file with numeric features.
    Csv { path: PathBuf, label_column: String },
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TaskSpec::Blobs { classes, n, noise, radius, label_noise, .. } => {
                if *classes < 2 {
                    return Err(Error::Config(format!("blobs need at least 2 classes, got {classes}")));
                }
                if *n < *classes {
                    return Err(Error::Config(format!("blobs with n = {n} < {classes} classes")));
                }
                if !(*noise >= 0.0 && noise.is_finite() && radius.is_finite()) {
                    return Err(Error::Config("blobs noise and radius must be finite, noise >= 0".into()));
                }
                if !(0.0..1.0).contains(label_noise) {
                    return Err(Error::Config(format!("label_noise {label_noise} outside [0, 1)")));
                }
            }
            TaskSpec::Spirals { n, noise } => {
                if *n < 2 || !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::Config(format!("spirals need n >= 2 and noise >= 0, got n = {n}")));
                }
            }
            TaskSpec::Csv { path, .. } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("data file {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dims("dataset labels", x.rows(), y.len()));
        }
        if let Some((i, &c)) = y.iter().enumerate().find(|(_, &c)| c >= n_classes) {
            return Err(Error::LabelOutOfRange { sample: i, label: c, classes: n_classes });
        }
        Ok(Self { x, y, n_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    /// The subset at `idx`, renumbered from 0.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (x, y) = self.select(idx);
        Dataset { x, y, n_classes: self.n_classes }
    }

    pub fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &i in idx {
            counts[self.y[i]] += 1;
        }
        counts
    }
}

pub fn make_dataset(spec: &TaskSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    match spec {
        &TaskSpec::Blobs { classes, n, noise, radius, label_noise, noise_dims } => {
            Ok(blobs(classes, n, noise, radius, label_noise, noise_dims, rng))
        }
        &TaskSpec::Spirals { n, noise } => Ok(spirals(n, noise, rng)),
        TaskSpec::Csv { path, label_column } => read_csv(path, label_column),
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn blobs(classes: usize, n: usize, noise: f64, radius: f64, label_noise: f64, noise_dims: usize, rng: &mut Rng) -> Dataset {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let width = 2 + noise_dims;
    let mut data = Vec::with_capacity(width * n);
    let mut y = Vec::with_capacity(n);
    for &c in &labels {
        let angle = 2.0 * PI * c as f64 / classes as f64;
        data.push(radius * angle.cos() + noise * normal(rng));
        data.push(radius * angle.sin() + noise * normal(rng));
        data.extend((0..noise_dims).map(|_| normal(rng)));
        if label_noise > 0.0 && rng.random::<f64>() < label_noise {
            y.push((c + rng.random_range(1..classes)) % classes);
        } else {
            y.push(c);
        }
    }
    Dataset { x: Matrix::from_vec(n, width, data).expect("finite draws"), y, n_classes: classes }
}

fn spirals(n: usize, noise: f64, rng: &mut Rng) -> Dataset {
    let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(2 * n);
    for &c in &labels {
        // Radius grows with angle; the second arm is the first rotated by π.
        let t: f64 = rng.random_range(0.05..1.0);
        let angle = 3.0 * PI * t + PI * c as f64;
        data.push(t * angle.cos() + noise * normal(rng));
        data.push(t * angle.sin() + noise * normal(rng));
    }
    Dataset { x: Matrix::from_vec(n, 2, data).expect("finite draws"), y: labels, n_classes: 2 }
}

/// Reads a headered CSV. Labels that all parse as non-negative integers are
/// used as class ids; otherwise the sorted distinct strings are numbered.
pub fn read_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, path, label_column)
}

fn parse_csv<R: std::io::Read>(input: R, path: &Path, label_column: &str) -> Result<Dataset> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| parse_err(1, format!("no column named {label_column:?}")))?;
    let n_features = headers.len() - 1;
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", headers.len(), record.len())));
        }
        for (j, field) in record.iter().enumerate() {
            if j == label_at {
                raw_labels.push(field.trim().to_string());
                continue;
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric feature {:?} in column {:?}", field, &headers[j])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature in column {:?}", &headers[j])));
            }
            data.push(v);
        }
    }
    if raw_labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let numeric: Option<Vec<usize>> = raw_labels.iter().map(|s| s.parse().ok()).collect();
    let (y, n_classes) = match numeric {
        Some(y) => {
            let k = y.iter().max().map_or(0, |m| m + 1);
            (y, k)
        }
        None => {
            let names: BTreeMap<&str, usize> = {
                let mut distinct: Vec<&str> = raw_labels.iter().map(String::as_str).collect();
                distinct.sort_unstable();
                distinct.dedup();
                distinct.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
            };
            (raw_labels.iter().map(|s| names[s.as_str()]).collect(), names.len())
        }
    };
    let x = Matrix::from_vec(y.len(), n_features, data)?;
    Dataset::new(x, y, n_classes.max(2))
}

/// Writes `f0, …, f{F-1}, label`; `{}` formatting of `f64` round-trips exactly.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..data.features()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    out.write_record(&header)?;
    for (row, &y) in data.x.iter_rows().zip(&data.y) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(y.to_string());
        out.write_record(&fields)?;
    }
    let bytes = out.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

/// Stratified `(pool, test)` index split with `round(fraction · n)` test points.
pub fn split_test(data: &Dataset, fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {fraction} outside (0, 1)")));
    }
    let n = data.len();
    let n_test = (fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::invalid(format!("test split of {n_test} from {n} points")));
    }
    let all: Vec<usize> = (0..n).collect();
    let order = stratified_order(&all, Some(&data.y), rng);
    let mut test = order[..n_test].to_vec();
    let mut pool = order[n_test..].to_vec();
    test.sort_unstable();
    pool.sort_unstable();
    Ok((pool, test))
}

/// Per-feature affine map `(x - mean) / sd`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn identity(features: usize) -> Self {
        Self { mean: vec![0.0; features], sd: vec![1.0; features] }
    }

    /// Statistics of the rows `idx` only. Constant features get `sd = 1`.
    pub fn fit(x: &Matrix, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::invalid("standardizer fit on no rows"));
        }
        let f = x.cols();
        let n = idx.len() as f64;
        let mut mean = vec![0.0; f];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for &i in idx {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::dims("standardizer features", self.mean.len(), x.cols()));
        }
        let mut out = x.clone();
        for row in 0..out.rows() {
            for ((v, m), s) in out.row_mut(row).iter_mut().zip(&self.mean).zip(&self.sd) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}
