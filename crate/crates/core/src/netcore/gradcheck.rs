//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::matrix::Matrix;
use super::mlp::{loss, loss_and_grad, MlpParams, ParamTensors};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead. A 1e-5 central
/// difference of an O(1) loss carries ~1e-10 of roundoff, which a smaller
/// floor would turn into a spurious 1e-4 relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// One entry per checked coordinate.
    pub entries: Vec<CoordError>,
    /// Coordinates skipped because a perturbation crossed a ReLU kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    pub fn worst(&self) -> Option<&CoordError> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `loss_fn` around `params`.
///
/// `admissible(plus, minus)` may veto a coordinate, e.g. when the two
/// perturbed points straddle a non-differentiable kink.
pub fn finite_difference_check<P, L, A>(
    params: &P,
    analytic: &P,
    eps: f64,
    mut loss_fn: L,
    mut admissible: A,
) -> Result<GradCheckReport>
where
    P: ParamTensors + Clone,
    L: FnMut(&P) -> Result<f64>,
    A: FnMut(&P, &P) -> bool,
{
    let base = params.to_flat();
    let grad = analytic.to_flat();
    if base.len() != grad.len() {
        return Err(Error::dims("analytic gradient length", base.len(), grad.len()));
    }
    let mut plus = params.clone();
    let mut minus = params.clone();
    let mut work = base.clone();
    let mut report = GradCheckReport::default();
    for i in 0..base.len() {
        work[i] = base[i] + eps;
        plus.set_flat(&work);
        work[i] = base[i] - eps;
        minus.set_flat(&work);
        work[i] = base[i];
        if !admissible(&plus, &minus) {
            report.skipped += 1;
            continue;
        }
        let numeric = (loss_fn(&plus)? - loss_fn(&minus)?) / (2.0 * eps);
        let rel = rel_error(grad[i], numeric);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.entries.push(CoordError {
            index: i,
            analytic: grad[i],
            numeric,
            rel_error: rel,
        });
    }
    Ok(report)
}

fn relu_pattern(params: &MlpParams, x: &Matrix) -> Result<Vec<bool>> {
    let trace = params.forward_trace(x)?;
    Ok(trace
        .pre
        .iter()
        .flat_map(|z| z.as_slice().iter().map(|&v| v > 0.0))
        .collect())
}

/// Worst relative error between the backprop gradient of the mean NLL and
/// central differences with step `eps`.
///
/// Coordinates whose ±eps perturbations change any hidden unit's ReLU state
/// are skipped. A single-output network has a constant loss, so its report is
/// empty.
pub fn grad_check(params: &MlpParams, x: &Matrix, y: &[usize], eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    if params.output_dim() == 1 {
        return Ok(GradCheckReport::default());
    }
    let (_, analytic) = loss_and_grad(params, x, y)?;
    let base_pattern = relu_pattern(params, x)?;
    finite_difference_check(
        params,
        &analytic,
        eps,
        |p| loss(p, x, y),
        |plus, minus| {
            relu_pattern(plus, x).map_or(false, |p| p == base_pattern)
                && relu_pattern(minus, x).map_or(false, |p| p == base_pattern)
        },
    )
}
