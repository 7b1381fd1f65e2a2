//! Fully connected ReLU network with a softmax cross-entropy head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::matrix::{col_sums, matmul, matmul_nt, matmul_tn, Matrix};
use crate::error::{Error, Result};

/// Role of a parameter tensor, used by the optimizer to decide on weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    FastWeight,
    NormScale,
    NormShift,
}

/// A collection of trainable tensors visited in a fixed order.
///
/// Gradients are stored in the same type, so optimizer buffers line up with
/// parameters by position.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<(ParamKind, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for (_, t) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().expect("flat parameter vector too short");
            }
        }
    }
}

/// One affine layer, `x · weight + bias`, with `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::dims("dense bias length", weight.cols(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `x · W + b`.
    pub fn affine(&self, x: &Matrix) -> Matrix {
        let mut z = matmul(x, &self.weight);
        add_row_vector(&mut z, &self.bias);
        z
    }
}

/// MLP parameters: ReLU between hidden layers, identity on the output (logits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(
                    format!("layer {} input", l + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    /// He-normal weights, zero biases. `dims` is `[input, hidden.., classes]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive sd");
                let data = (0..w[0] * w[1]).map(|_| normal.sample(rng)).collect();
                Dense {
                    weight: Matrix::from_vec(w[0], w[1], data).expect("finite draws"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        Self::new(
            dims.windows(2)
                .map(|w| Dense {
                    weight: Matrix::zeros(w[0], w[1]),
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// `[input, hidden.., output]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim()];
        d.extend(self.layers.iter().map(Dense::out_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.logits)
    }

    pub(crate) fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("layer 0 input", self.input_dim(), x.cols()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&a);
            inputs.push(a);
            if l == last {
                return Ok(ForwardTrace {
                    inputs,
                    pre,
                    logits: z,
                });
            }
            a = z.map(relu);
            pre.push(z);
        }
        unreachable!("loop returns on the last layer")
    }

    /// Backpropagates `d_logits` (gradient of the loss w.r.t. the logits).
    pub(crate) fn backward(&self, trace: &ForwardTrace, d_logits: Matrix) -> MlpParams {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut dz = d_logits;
        for l in (0..self.layers.len()).rev() {
            let dw = matmul_tn(&trace.inputs[l], &dz);
            let db = col_sums(&dz);
            if l > 0 {
                let mut da = matmul_nt(&dz, &self.layers[l].weight);
                for (d, &z) in da.as_mut_slice().iter_mut().zip(trace.pre[l - 1].as_slice()) {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                dz = da;
            }
            grads.push(Dense { weight: dw, bias: db });
        }
        grads.reverse();
        MlpParams { layers: grads }
    }
}

impl ParamTensors for MlpParams {
    fn tensors(&self) -> Vec<(ParamKind, &[f64])> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (ParamKind::Weight, l.weight.as_slice()),
                    (ParamKind::Bias, l.bias.as_slice()),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    (ParamKind::Weight, l.weight.as_mut_slice()),
                    (ParamKind::Bias, l.bias.as_mut_slice()),
                ]
            })
            .collect()
    }
}

pub(crate) struct ForwardTrace {
    /// Activation entering each layer (`inputs[0]` is the network input).
    pub inputs: Vec<Matrix>,
    /// Hidden pre-activations, one per hidden layer.
    pub pre: Vec<Matrix>,
    pub logits: Matrix,
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub(crate) fn add_row_vector(z: &mut Matrix, b: &[f64]) {
    let cols = z.cols();
    for row in z.as_mut_slice().chunks_exact_mut(cols.max(1)) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

/// Runs the network on `x`, returning `N × K` logits.
pub fn mlp_forward(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    params.forward(x)
}

/// Log-sum-exp stabilized `log softmax` of one row, written into `out`.
pub fn log_softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let row = z.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - max).exp();
            sum += *ov;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    out
}

pub(crate) fn check_labels(y: &[usize], n: usize, classes: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::dims("label vector length", n, y.len()));
    }
    if let Some((i, &label)) = y.iter().enumerate().find(|(_, &c)| c >= classes) {
        return Err(Error::LabelOutOfRange {
            sample: i,
            label,
            classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy of `logits` against `y` and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, y: &[usize]) -> Result<(f64, Matrix)> {
    let (n, k) = (logits.rows(), logits.cols());
    check_labels(y, n, k)?;
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut grad = Matrix::zeros(n, k);
    let mut total = 0.0;
    let mut logp = vec![0.0; k];
    for i in 0..n {
        log_softmax_into(logits.row(i), &mut logp);
        let loss = -logp[y[i]];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { sample: i });
        }
        total += loss;
        let g = grad.row_mut(i);
        for (gv, &lp) in g.iter_mut().zip(&logp) {
            *gv = lp.exp() / n as f64;
        }
        g[y[i]] -= 1.0 / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Mean NLL of the network on `(x, y)` and the exact gradient w.r.t. every parameter.
pub fn loss_and_grad(params: &MlpParams, x: &Matrix, y: &[usize]) -> Result<(f64, MlpParams)> {
    let trace = params.forward_trace(x)?;
    let (loss, d_logits) = softmax_cross_entropy(&trace.logits, y)?;
    Ok((loss, params.backward(&trace, d_logits)))
}

/// Mean NLL only.
pub fn loss(params: &MlpParams, x: &Matrix, y: &[usize]) -> Result<f64> {
    let logits = params.forward(x)?;
    Ok(softmax_cross_entropy(&logits, y)?.0)
}
