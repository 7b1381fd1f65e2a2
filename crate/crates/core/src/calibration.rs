//! Temperature scaling for single models and ensembles.
//!
//! Three ways to calibrate an ensemble with temperatures:
//!
//! - **individual**: each member gets its own `T_m`, fit on its own
//!   validation set; the prediction averages `softmax(z_m / T_m)`;
//! - **joint**: one `T` shared by all members, fit on the NLL of the averaged
//!   tempered prediction;
//! - **pool**: average first, then temper the log of the pooled prediction,
//!   `softmax(ln p̄ / T)`, which cannot change the predicted class.
//!
//! Every fit is a 1-D minimization over `ln T` (see [`fit_temperature`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ensemble_mean, nll, ProbMatrix, PROB_FLOOR};
use crate::netcore::{check_labels, log_softmax_into, Matrix};

pub const T_MIN: f64 = 0.01;
pub const T_MAX: f64 = 100.0;
/// Convergence tolerance in `ln T`.
pub const LOG_T_TOL: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 100;
/// Coarse log-spaced scan used to locate the basin before golden-section search.
const SCAN_POINTS: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    None,
    Individual,
    Joint,
    Pool,
}

impl CalibrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CalibrationMode::None => "none",
            CalibrationMode::Individual => "individual",
            CalibrationMode::Joint => "joint",
            CalibrationMode::Pool => "pool",
        }
    }
}

/// Outcome of a scalar fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarFit {
    pub temperature: f64,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The minimum sits at an end of the bracket.
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempFitResult {
    pub mode: CalibrationMode,
    /// One entry for joint/pool fits, one per member for individual fits.
    pub temperatures: Vec<f64>,
    pub val_nll: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `softmax(z / T)` row-wise.
pub fn apply_temperature(z: &Matrix, t: f64) -> Result<ProbMatrix> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {t}")));
    }
    Ok(ProbMatrix::from_logits(&z.map(|v| v / t)))
}

/// Minimizes `objective(T)` over `ln T ∈ [ln lo, ln hi]`.
///
/// A coarse log-spaced scan picks the best basin, then golden-section search
/// narrows it to `tol` in `ln T`, stopping after `MAX_ITERATIONS` steps.
pub fn fit_temperature<F>(mut objective: F, bracket: (f64, f64), tol: f64) -> Result<ScalarFit>
where
    F: FnMut(f64) -> f64,
{
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::invalid(format!("bad temperature bracket ({lo}, {hi})")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    let mut eval = |u: f64| -> Result<f64> {
        let v = objective(u.exp().clamp(lo, hi));
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("temperature objective at T = {}", u.exp())))
        }
    };
    let (a0, b0) = (lo.ln(), hi.ln());
    let step = (b0 - a0) / (SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|i| a0 + step * i as f64).collect();
    let mut values = Vec::with_capacity(SCAN_POINTS);
    for &u in &grid {
        values.push(eval(u)?);
    }
    let best = values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .expect("non-empty scan");

    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(SCAN_POINTS - 1)]);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    let mut iterations = 0;
    while (b - a) > tol && iterations < MAX_ITERATIONS {
        iterations += 1;
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d)?;
        }
    }
    let converged = (b - a) <= tol;
    let (mut u, mut value) = if fc < fd { (c, fc) } else { (d, fd) };
    let mid = 0.5 * (a + b);
    let fmid = eval(mid)?;
    if fmid <= value {
        u = mid;
        value = fmid;
    }
    let mut temperature = u.exp();
    let mut at_boundary = false;
    for (edge, t_edge, fedge) in [(a0, lo, values[0]), (b0, hi, values[SCAN_POINTS - 1])] {
        if (u - edge).abs() <= tol && fedge <= value {
            temperature = t_edge;
            value = fedge;
            at_boundary = true;
        }
    }
    Ok(ScalarFit {
        temperature,
        value,
        iterations,
        converged,
        at_boundary,
    })
}

/// Logits and labels of one validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLogits {
    pub logits: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledLogits {
    pub fn new(logits: Matrix, labels: Vec<usize>) -> Result<Self> {
        check_labels(&labels, logits.rows(), logits.cols())?;
        if labels.is_empty() {
            return Err(Error::invalid("empty validation set"));
        }
        Ok(Self { logits, labels })
    }

    /// Mean NLL of `softmax(z / T)`.
    pub fn nll_at(&self, t: f64) -> f64 {
        let mut buf = vec![0.0; self.logits.cols()];
        let mut scaled = vec![0.0; self.logits.cols()];
        let mut total = 0.0;
        for (row, &y) in self.logits.iter_rows().zip(&self.labels) {
            for (s, &v) in scaled.iter_mut().zip(row) {
                *s = v / t;
            }
            log_softmax_into(&scaled, &mut buf);
            total -= buf[y];
        }
        total / self.labels.len() as f64
    }
}

/// Several members' logits on one common validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct JointValSet {
    pub member_logits: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl JointValSet {
    pub fn new(member_logits: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        if member_logits.is_empty() {
            return Err(Error::invalid("joint validation set without members"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("empty joint validation set"));
        }
        for z in &member_logits {
            check_labels(&labels, z.rows(), z.cols())?;
        }
        Ok(Self { member_logits, labels })
    }

    /// NLL of the average of `softmax(z_m / T)`.
    pub fn nll_at(&self, t: f64) -> f64 {
        let probs = tempered_members(&self.member_logits, &vec![t; self.member_logits.len()]);
        let mean = ensemble_mean(&probs).expect("shapes checked on construction");
        nll(&mean, &self.labels).expect("labels checked on construction")
    }
}

fn tempered_members(member_logits: &[Matrix], temps: &[f64]) -> Vec<ProbMatrix> {
    member_logits
        .iter()
        .zip(temps)
        .map(|(z, &t)| ProbMatrix::from_logits(&z.map(|v| v / t)))
        .collect()
}

/// Fits `T_m` for each member on its own validation set.
pub fn calibrate_individual(member_val: &[LabeledLogits]) -> Result<TempFitResult> {
    if member_val.is_empty() {
        return Err(Error::invalid("no members to calibrate"));
    }
    let mut temperatures = Vec::with_capacity(member_val.len());
    let mut total = 0.0;
    let mut iterations = 0;
    let mut converged = true;
    for (m, set) in member_val.iter().enumerate() {
        if set.labels.is_empty() {
            return Err(Error::invalid(format!("member {m} has an empty validation set")));
        }
        let fit = fit_temperature(|t| set.nll_at(t), (T_MIN, T_MAX), LOG_T_TOL)
            .map_err(|e| e.context(format!("member {m}")))?;
        temperatures.push(fit.temperature);
        total += fit.value;
        iterations = iterations.max(fit.iterations);
        converged &= fit.converged;
    }
    Ok(TempFitResult {
        mode: CalibrationMode::Individual,
        temperatures,
        val_nll: total / member_val.len() as f64,
        iterations,
        converged,
    })
}

/// Fits one temperature for all members on the mean NLL over `sets`.
///
/// Pass one set for a shared holdout, or one set per adjacent pair for an
/// overlapping holdout.
pub fn calibrate_joint(sets: &[JointValSet]) -> Result<TempFitResult> {
    if sets.is_empty() {
        return Err(Error::invalid("joint temperature scaling needs a joint validation set"));
    }
    let objective = |t: f64| sets.iter().map(|s| s.nll_at(t)).sum::<f64>() / sets.len() as f64;
    let fit = fit_temperature(objective, (T_MIN, T_MAX), LOG_T_TOL)?;
    Ok(TempFitResult {
        mode: CalibrationMode::Joint,
        temperatures: vec![fit.temperature],
        val_nll: fit.value,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// `softmax(ln p̄ / T)` with `p̄` floored before the log.
pub fn apply_pool(pooled: &ProbMatrix, t: f64) -> Result<ProbMatrix> {
    apply_temperature(&pooled.matrix().map(|p| p.max(PROB_FLOOR).ln()), t)
}

/// Fits the temperature applied to the log of an already averaged prediction.
pub fn calibrate_pool(pooled: &ProbMatrix, labels: &[usize]) -> Result<TempFitResult> {
    let set = LabeledLogits::new(pooled.matrix().map(|p| p.max(PROB_FLOOR).ln()), labels.to_vec())?;
    let fit = fit_temperature(|t| set.nll_at(t), (T_MIN, T_MAX), LOG_T_TOL)?;
    Ok(TempFitResult {
        mode: CalibrationMode::Pool,
        temperatures: vec![fit.temperature],
        val_nll: fit.value,
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Average of `softmax(z_m / T_m)`.
pub fn predict_individual(member_logits: &[Matrix], temps: &[f64]) -> Result<ProbMatrix> {
    if member_logits.len() != temps.len() {
        return Err(Error::dims("temperature count", member_logits.len(), temps.len()));
    }
    for &t in temps {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {t}")));
        }
    }
    ensemble_mean(&tempered_members(member_logits, temps))
}

/// Average of `softmax(z_m / T)`.
pub fn predict_joint(member_logits: &[Matrix], t: f64) -> Result<ProbMatrix> {
    predict_individual(member_logits, &vec![t; member_logits.len()])
}

/// Ensemble prediction under a fitted calibration.
pub fn predict(member_logits: &[Matrix], fit: Option<&TempFitResult>) -> Result<ProbMatrix> {
    match fit {
        None => predict_joint(member_logits, 1.0),
        Some(f) => match f.mode {
            CalibrationMode::None => predict_joint(member_logits, 1.0),
            CalibrationMode::Individual => predict_individual(member_logits, &f.temperatures),
            CalibrationMode::Joint => predict_joint(member_logits, f.temperatures[0]),
            CalibrationMode::Pool => apply_pool(&predict_joint(member_logits, 1.0)?, f.temperatures[0]),
        },
    }
}
