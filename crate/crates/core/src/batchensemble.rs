//! BatchEnsemble: `M` members sharing slow weights `W`, each modulated by
//! rank-1 fast weights so member `m` effectively uses `W ∘ (r_m s_mᵀ)`.
//!
//! Layers compute `((x ∘ r_m) W) ∘ s_m + b` and never materialize the
//! member matrices. Hidden layers are followed by a per-member batch norm and
//! a ReLU. All members run as one stacked computation: member blocks of rows
//! go through the same row-wise kernels, so the stacked forward equals the
//! per-member forward bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{nll, ProbMatrix};
use crate::netcore::{
    col_sums, finite_difference_check, matmul, matmul_nt, matmul_tn, softmax_cross_entropy, Checkpoint, CheckpointMeta,
    GradCheckReport, Matrix, MlpParams, OptimizerConfig, OptimizerState, ParamKind, ParamTensors,
};
use crate::rng::{derive_rng, Purpose, Rng};
use crate::splits::SplitPlan;
use crate::training::{joint_score, normalized_epochs, EarlyStopper, MonitorRow, StopDecision, StoppingConfig, TrainData};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Distribution of the initial fast-weight entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum FastInit {
    /// Each entry `~ Normal(1, sigma²)`.
    Gaussian { sigma: f64 },
    /// Each entry `±1` with equal probability.
    RandomSign,
}

impl FastInit {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FastInit::Gaussian { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::invalid(format!("gaussian fast-weight init needs sigma > 0, got {sigma}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            FastInit::Gaussian { sigma } => format!("gaussian_{sigma}"),
            FastInit::RandomSign => "random_sign".into(),
        }
    }
}

/// Fast weights of one layer: row `m` of `r` (`M × in`) and `s` (`M × out`)
/// belongs to member `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastLayer {
    pub r: Matrix,
    pub s: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastWeights {
    pub layers: Vec<FastLayer>,
}

impl FastWeights {
    pub fn ones(dims: &[usize], members: usize) -> Self {
        Self {
            layers: dims
                .windows(2)
                .map(|d| FastLayer {
                    r: Matrix::filled(members, d[0], 1.0),
                    s: Matrix::filled(members, d[1], 1.0),
                })
                .collect(),
        }
    }

    pub fn members(&self) -> usize {
        self.layers.first().map_or(0, |l| l.r.rows())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.r.is_finite() && l.s.is_finite())
    }
}

pub fn init_fast(dims: &[usize], members: usize, scheme: FastInit, rng: &mut Rng) -> Result<FastWeights> {
    scheme.validate()?;
    if dims.len() < 2 || members == 0 {
        return Err(Error::invalid("fast weights need at least one layer and one member"));
    }
    let mut fast = FastWeights::ones(dims, members);
    let mut draw = |m: &mut Matrix| match scheme {
        FastInit::Gaussian { sigma } => {
            let dist = Normal::new(1.0, sigma).expect("sigma validated");
            m.as_mut_slice().iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        FastInit::RandomSign => {
            m.as_mut_slice().iter_mut().for_each(|v| *v = if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
    };
    for layer in &mut fast.layers {
        draw(&mut layer.r);
        draw(&mut layer.s);
    }
    Ok(fast)
}

/// Per-member batch norm of one hidden layer; row `m` belongs to member `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
}

impl BatchNorm {
    pub fn identity(members: usize, width: usize) -> Self {
        Self {
            gamma: Matrix::filled(members, width, 1.0),
            beta: Matrix::zeros(members, width),
            running_mean: Matrix::zeros(members, width),
            running_var: Matrix::filled(members, width, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEnsembleModel {
    pub slow: MlpParams,
    pub fast: FastWeights,
    pub batch_norm: bool,
    /// One per hidden layer when `batch_norm` is set, else empty.
    pub norms: Vec<BatchNorm>,
    /// Input standardization per member, fitted on its training rows.
    pub standardizers: Vec<Standardizer>,
}

/// Rows `start..start + len` of a stacked matrix belong to `member`.
#[derive(Debug, Clone, Copy)]
struct Block {
    member: usize,
    start: usize,
    len: usize,
}

impl Block {
    fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

fn blocks_for(sizes: impl IntoIterator<Item = (usize, usize)>) -> Vec<Block> {
    let mut start = 0;
    sizes
        .into_iter()
        .map(|(member, len)| {
            let b = Block { member, start, len };
            start += len;
            b
        })
        .collect()
}

struct LayerTrace {
    /// Layer input before fast-weight scaling.
    x: Matrix,
    /// `x ∘ r`.
    u: Matrix,
    /// `u W`.
    v: Matrix,
    /// Hidden layers with batch norm: normalized pre-activations and the
    /// per-block `1 / sqrt(var + eps)`.
    h_hat: Option<Matrix>,
    inv_std: Vec<Vec<f64>>,
    /// Hidden layers: input to the ReLU.
    y: Option<Matrix>,
    /// Train mode: per-block batch mean and variance.
    batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

struct Trace {
    blocks: Vec<Block>,
    train: bool,
    layers: Vec<LayerTrace>,
    logits: Matrix,
}

impl BatchEnsembleModel {
    pub fn new(slow: MlpParams, fast: FastWeights, batch_norm: bool) -> Result<Self> {
        let members = fast.members();
        if members == 0 {
            return Err(Error::invalid("batch ensemble without members"));
        }
        if fast.layers.len() != slow.layers.len() {
            return Err(Error::dims("fast weight layers", slow.layers.len(), fast.layers.len()));
        }
        for (l, (f, w)) in fast.layers.iter().zip(&slow.layers).enumerate() {
            if f.r.rows() != members || f.s.rows() != members {
                return Err(Error::dims(format!("layer {l} fast weight members"), members, f.r.rows().min(f.s.rows())));
            }
            if f.r.cols() != w.in_dim() {
                return Err(Error::dims(format!("layer {l} r"), w.in_dim(), f.r.cols()));
            }
            if f.s.cols() != w.out_dim() {
                return Err(Error::dims(format!("layer {l} s"), w.out_dim(), f.s.cols()));
            }
        }
        let norms = if batch_norm {
            slow.layers[..slow.layers.len() - 1]
                .iter()
                .map(|l| BatchNorm::identity(members, l.out_dim()))
                .collect()
        } else {
            Vec::new()
        };
        let standardizers = vec![Standardizer::identity(slow.input_dim()); members];
        Ok(Self { slow, fast, batch_norm, norms, standardizers })
    }

    /// He-initialized slow weights and fast weights drawn from `scheme`.
    pub fn init(dims: &[usize], members: usize, scheme: FastInit, batch_norm: bool, rng: &mut Rng) -> Result<Self> {
        let slow = MlpParams::init(dims, rng)?;
        let fast = init_fast(dims, members, scheme, rng)?;
        Self::new(slow, fast, batch_norm)
    }

    pub fn members(&self) -> usize {
        self.fast.members()
    }

    /// Same structure with every tensor zeroed; used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.slow.is_finite()
            && self.fast.is_finite()
            && self.norms.iter().all(|n| {
                n.gamma.is_finite() && n.beta.is_finite() && n.running_mean.is_finite() && n.running_var.is_finite()
            })
    }

    fn check_member(&self, m: usize) -> Result<()> {
        if m >= self.members() {
            return Err(Error::invalid(format!("member {m} of a {}-member ensemble", self.members())));
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.slow.input_dim() {
            return Err(Error::dims("layer 0 input", self.slow.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Logits of member `m` (eval mode: batch norm uses running statistics).
    pub fn be_forward(&self, x: &Matrix, m: usize) -> Result<Matrix> {
        self.check_member(m)?;
        self.check_input(x)?;
        let xs = self.standardizers[m].apply(x)?;
        Ok(self.forward_stacked(xs, blocks_for([(m, x.rows())]), false).logits)
    }

    /// Logits of every member on `x`, computed as one stacked pass.
    pub fn be_forward_all(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.check_input(x)?;
        let inputs = self.standardizers.iter().map(|s| s.apply(x)).collect::<Result<Vec<_>>>()?;
        let stacked = Matrix::vstack(&inputs)?;
        let logits = self
            .forward_stacked(stacked, blocks_for((0..self.members()).map(|m| (m, x.rows()))), false)
            .logits;
        Ok(if x.rows() == 0 {
            vec![Matrix::zeros(0, self.slow.output_dim()); self.members()]
        } else {
            logits.split_rows(x.rows())
        })
    }

    pub fn member_probs(&self, x: &Matrix) -> Result<Vec<ProbMatrix>> {
        Ok(self.be_forward_all(x)?.iter().map(ProbMatrix::from_logits).collect())
    }

    fn forward_stacked(&self, input: Matrix, blocks: Vec<Block>, train: bool) -> Trace {
        let last = self.slow.layers.len() - 1;
        let mut layers = Vec::with_capacity(self.slow.layers.len());
        let mut a = input;
        for (l, (dense, fast)) in self.slow.layers.iter().zip(&self.fast.layers).enumerate() {
            let mut u = a.clone();
            for b in &blocks {
                let r = fast.r.row(b.member);
                for i in b.rows() {
                    u.row_mut(i).iter_mut().zip(r).for_each(|(v, &rv)| *v *= rv);
                }
            }
            let v = matmul(&u, &dense.weight);
            let mut h = v.clone();
            for b in &blocks {
                let s = fast.s.row(b.member);
                for i in b.rows() {
                    for ((hv, &sv), &bv) in h.row_mut(i).iter_mut().zip(s).zip(&dense.bias) {
                        *hv = *hv * sv + bv;
                    }
                }
            }
            let mut trace = LayerTrace { x: a, u, v, h_hat: None, inv_std: Vec::new(), y: None, batch_stats: Vec::new() };
            if l == last {
                layers.push(trace);
                return Trace { blocks, train, layers, logits: h };
            }
            let y = if self.batch_norm {
                let norm = &self.norms[l];
                let width = h.cols();
                let mut h_hat = h.clone();
                let mut y = h;
                for b in &blocks {
                    let (mean, var) = if train {
                        let n = b.len.max(1) as f64;
                        let mut mean = vec![0.0; width];
                        for i in b.rows() {
                            mean.iter_mut().zip(y.row(i)).for_each(|(m, &v)| *m += v);
                        }
                        mean.iter_mut().for_each(|m| *m /= n);
                        let mut var = vec![0.0; width];
                        for i in b.rows() {
                            var.iter_mut().zip(y.row(i)).zip(&mean).for_each(|((s, &v), m)| *s += (v - m) * (v - m));
                        }
                        var.iter_mut().for_each(|s| *s /= n);
                        (mean, var)
                    } else {
                        (norm.running_mean.row(b.member).to_vec(), norm.running_var.row(b.member).to_vec())
                    };
                    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                    let (gamma, beta) = (norm.gamma.row(b.member), norm.beta.row(b.member));
                    for i in b.rows() {
                        for k in 0..width {
                            let hat = (y[(i, k)] - mean[k]) * inv[k];
                            h_hat[(i, k)] = hat;
                            y[(i, k)] = gamma[k] * hat + beta[k];
                        }
                    }
                    trace.inv_std.push(inv);
                    if train {
                        trace.batch_stats.push((mean, var));
                    }
                }
                trace.h_hat = Some(h_hat);
                y
            } else {
                h
            };
            a = y.map(|v| if v > 0.0 { v } else { 0.0 });
            trace.y = Some(y);
            layers.push(trace);
        }
        unreachable!("loop returns on the last layer")
    }

    fn backward(&self, trace: &Trace, d_logits: Matrix) -> Self {
        let mut grad = self.zeros_like();
        let last = self.slow.layers.len() - 1;
        let mut g = d_logits;
        for l in (0..=last).rev() {
            let lt = &trace.layers[l];
            let fast = &self.fast.layers[l];
            let dh = if l == last {
                g
            } else {
                let y = lt.y.as_ref().expect("hidden layer trace");
                let mut dy = g;
                dy.as_mut_slice().iter_mut().zip(y.as_slice()).for_each(|(d, &yv)| {
                    if yv <= 0.0 {
                        *d = 0.0;
                    }
                });
                if self.batch_norm {
                    let h_hat = lt.h_hat.as_ref().expect("batch norm trace");
                    let norm = &self.norms[l];
                    let gn = &mut grad.norms[l];
                    let width = dy.cols();
                    let mut dh = Matrix::zeros(dy.rows(), width);
                    for (bi, b) in trace.blocks.iter().enumerate() {
                        let gamma = norm.gamma.row(b.member);
                        let inv = &lt.inv_std[bi];
                        let mut sum_dhat = vec![0.0; width];
                        let mut sum_dhat_hat = vec![0.0; width];
                        for i in b.rows() {
                            for k in 0..width {
                                let d = dy[(i, k)];
                                gn.gamma[(b.member, k)] += d * h_hat[(i, k)];
                                gn.beta[(b.member, k)] += d;
                                let dhat = d * gamma[k];
                                sum_dhat[k] += dhat;
                                sum_dhat_hat[k] += dhat * h_hat[(i, k)];
                            }
                        }
                        let n = b.len as f64;
                        for i in b.rows() {
                            for k in 0..width {
                                let dhat = dy[(i, k)] * gamma[k];
                                dh[(i, k)] = if trace.train {
                                    inv[k] / n * (n * dhat - sum_dhat[k] - h_hat[(i, k)] * sum_dhat_hat[k])
                                } else {
                                    dhat * inv[k]
                                };
                            }
                        }
                    }
                    dh
                } else {
                    dy
                }
            };
            let gl = &mut grad.slow.layers[l];
            gl.bias = col_sums(&dh);
            let mut dv = dh;
            let gf = &mut grad.fast.layers[l];
            for b in &trace.blocks {
                let s = fast.s.row(b.member);
                for i in b.rows() {
                    let vrow = lt.v.row(i);
                    let ds = gf.s.row_mut(b.member);
                    for (k, d) in dv.row_mut(i).iter_mut().enumerate() {
                        ds[k] += *d * vrow[k];
                        *d *= s[k];
                    }
                }
            }
            gl.weight = matmul_tn(&lt.u, &dv);
            let mut du = matmul_nt(&dv, &self.slow.layers[l].weight);
            for b in &trace.blocks {
                let r = fast.r.row(b.member);
                for i in b.rows() {
                    let xrow = lt.x.row(i);
                    let dr = gf.r.row_mut(b.member);
                    for (j, d) in du.row_mut(i).iter_mut().enumerate() {
                        dr[j] += *d * xrow[j];
                        *d *= r[j];
                    }
                }
            }
            g = du;
        }
        grad
    }

    /// Train-mode pass over per-member batches `(member, x, y)` with `x`
    /// already standardized. Returns the summed per-member mean NLL, its
    /// gradient and the trace.
    fn train_pass(&self, batches: &[(usize, &Matrix, &[usize])]) -> Result<(f64, Self, Trace)> {
        for &(m, x, y) in batches {
            self.check_member(m)?;
            self.check_input(x)?;
            if x.rows() != y.len() {
                return Err(Error::dims("batch labels", x.rows(), y.len()));
            }
            if x.rows() == 0 {
                return Err(Error::invalid(format!("empty batch for member {m}")));
            }
        }
        let blocks = blocks_for(batches.iter().map(|&(m, x, _)| (m, x.rows())));
        let inputs: Vec<Matrix> = batches.iter().map(|&(_, x, _)| x.clone()).collect();
        let trace = self.forward_stacked(Matrix::vstack(&inputs)?, blocks, true);
        let mut total = 0.0;
        let mut d_blocks = Vec::with_capacity(batches.len());
        for (b, &(_, _, y)) in trace.blocks.iter().zip(batches) {
            let rows: Vec<usize> = b.rows().collect();
            let (loss, d) = softmax_cross_entropy(&trace.logits.select_rows(&rows), y)?;
            total += loss;
            d_blocks.push(d);
        }
        let grad = self.backward(&trace, Matrix::vstack(&d_blocks)?);
        Ok((total, grad, trace))
    }

    fn standardize_batches(&self, batches: &[(usize, &Matrix, &[usize])]) -> Result<Vec<Matrix>> {
        batches
            .iter()
            .map(|&(m, x, _)| {
                self.check_member(m)?;
                self.standardizers[m].apply(x)
            })
            .collect()
    }

    /// Sum over batches `(member, x, y)` of each member's mean NLL in train
    /// mode (batch norm on batch statistics), and its gradient.
    pub fn loss_and_grad(&self, batches: &[(usize, &Matrix, &[usize])]) -> Result<(f64, Self)> {
        let xs = self.standardize_batches(batches)?;
        let view: Vec<(usize, &Matrix, &[usize])> = batches.iter().zip(&xs).map(|(&(m, _, y), x)| (m, x, y)).collect();
        let (loss, grad, _) = self.train_pass(&view)?;
        Ok((loss, grad))
    }

    pub fn loss(&self, batches: &[(usize, &Matrix, &[usize])]) -> Result<f64> {
        Ok(self.loss_and_grad(batches)?.0)
    }

    fn update_running_stats(&mut self, trace: &Trace) {
        if !self.batch_norm {
            return;
        }
        for (l, lt) in trace.layers.iter().enumerate().take(self.norms.len()) {
            let norm = &mut self.norms[l];
            for (b, (mean, var)) in trace.blocks.iter().zip(&lt.batch_stats) {
                let rm = norm.running_mean.row_mut(b.member);
                rm.iter_mut().zip(mean).for_each(|(r, &v)| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
                let rv = norm.running_var.row_mut(b.member);
                rv.iter_mut().zip(var).for_each(|(r, &v)| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
            }
        }
    }

    fn relu_pattern(&self, batches: &[(usize, &Matrix, &[usize])]) -> Vec<bool> {
        let Ok(xs) = self.standardize_batches(batches) else {
            return Vec::new();
        };
        let blocks = blocks_for(batches.iter().map(|&(m, x, _)| (m, x.rows())));
        let Ok(stacked) = Matrix::vstack(&xs) else {
            return Vec::new();
        };
        let trace = self.forward_stacked(stacked, blocks, true);
        trace
            .layers
            .iter()
            .filter_map(|l| l.y.as_ref())
            .flat_map(|y| y.as_slice().iter().map(|&v| v > 0.0))
            .collect()
    }
}

impl ParamTensors for BatchEnsembleModel {
    fn tensors(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = self.slow.tensors();
        for f in &self.fast.layers {
            out.push((ParamKind::FastWeight, f.r.as_slice()));
            out.push((ParamKind::FastWeight, f.s.as_slice()));
        }
        for n in &self.norms {
            out.push((ParamKind::NormScale, n.gamma.as_slice()));
            out.push((ParamKind::NormShift, n.beta.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = self.slow.tensors_mut();
        for f in &mut self.fast.layers {
            out.push((ParamKind::FastWeight, f.r.as_mut_slice()));
            out.push((ParamKind::FastWeight, f.s.as_mut_slice()));
        }
        for n in &mut self.norms {
            out.push((ParamKind::NormScale, n.gamma.as_mut_slice()));
            out.push((ParamKind::NormShift, n.beta.as_mut_slice()));
        }
        out
    }
}

/// Finite-difference check of [`BatchEnsembleModel::loss_and_grad`] over all
/// slow, fast and batch-norm parameters. Coordinates whose perturbation flips
/// a ReLU are skipped.
pub fn be_grad_check(model: &BatchEnsembleModel, batches: &[(usize, &Matrix, &[usize])], eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let (_, analytic) = model.loss_and_grad(batches)?;
    let base = model.relu_pattern(batches);
    finite_difference_check(
        model,
        &analytic,
        eps,
        |p| p.loss(batches),
        |plus, minus| plus.relu_pattern(batches) == base && minus.relu_pattern(batches) == base,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeRun {
    pub model: BatchEnsembleModel,
    pub decision: StopDecision,
    pub log: Vec<MonitorRow>,
}

/// Trains all members together with early stopping and restores the best
/// epoch.
///
/// Each step draws one mini-batch per member from that member's own training
/// rows; an epoch has `ceil(max train size / batch)` steps and a member whose
/// rows run out sits the remaining steps out. The monitored score is the
/// joint ensemble NLL for shared and overlapping plans and the mean member
/// NLL for disjoint plans. `stopping.mode` is ignored: members share slow
/// weights, so they always stop together.
pub fn be_train(
    mut model: BatchEnsembleModel,
    data: TrainData<'_>,
    plan: &SplitPlan,
    opt: &OptimizerConfig,
    stopping: &StoppingConfig,
    seed: u64,
) -> Result<BeRun> {
    stopping.validate()?;
    let m_count = model.members();
    if plan.members.len() != m_count {
        return Err(Error::dims("plan members", m_count, plan.members.len()));
    }
    if data.x.rows() != plan.n_total {
        return Err(Error::dims("plan size", plan.n_total, data.x.rows()));
    }
    for (m, split) in plan.members.iter().enumerate() {
        if split.train.is_empty() || split.val.is_empty() {
            return Err(Error::invalid(format!("member {m} has an empty train or validation set")));
        }
        model.standardizers[m] = Standardizer::fit(data.x, &split.train)?;
    }
    let xs: Vec<Matrix> = model.standardizers.iter().map(|s| s.apply(data.x)).collect::<Result<_>>()?;
    let mut orders: Vec<Vec<usize>> = plan.members.iter().map(|s| s.train.clone()).collect();
    let mut rngs: Vec<Rng> = (0..m_count).map(|m| derive_rng(seed, m as u64, Purpose::Shuffle)).collect();
    let max_train = orders.iter().map(Vec::len).max().unwrap_or(0);
    let steps_per_epoch = max_train.div_ceil(stopping.batch_size);
    let mut state = OptimizerState::new(*opt)?;
    let mut stopper = EarlyStopper::new(stopping.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut stopped = false;
    for epoch in 0..stopping.max_epochs {
        for (order, rng) in orders.iter_mut().zip(&mut rngs) {
            order.shuffle(rng);
        }
        for step in 0..steps_per_epoch {
            let mut xb = Vec::new();
            let mut yb = Vec::new();
            for (m, order) in orders.iter().enumerate() {
                let lo = step * stopping.batch_size;
                if lo >= order.len() {
                    continue;
                }
                let idx = &order[lo..(lo + stopping.batch_size).min(order.len())];
                xb.push((m, xs[m].select_rows(idx)));
                yb.push(data.labels(idx));
            }
            let batches: Vec<(usize, &Matrix, &[usize])> =
                xb.iter().zip(&yb).map(|((m, x), y)| (*m, x, y.as_slice())).collect();
            let (_, grad, trace) = model.train_pass(&batches)?;
            model.update_running_stats(&trace);
            state.step(&mut model, &grad, opt.base_lr)?;
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("batch ensemble parameters after epoch {epoch}")));
        }
        let member_probs_on = |m: usize, idx: &[usize]| -> Result<ProbMatrix> {
            Ok(ProbMatrix::from_logits(&model.be_forward(&data.x.select_rows(idx), m)?))
        };
        for (m, split) in plan.members.iter().enumerate() {
            let val_nll = nll(&member_probs_on(m, &split.val)?, &data.labels(&split.val))?;
            log.push(MonitorRow { epoch, member: Some(m), nll: val_nll });
        }
        let score = joint_score(member_probs_on, plan, data.y)?;
        log.push(MonitorRow { epoch, member: None, nll: score });
        let (improved, stop) = stopper.push(score);
        if improved {
            best.clone_from(&model);
        }
        if stop {
            stopped = true;
            break;
        }
    }
    let mut decision = stopper.decision(stopped);
    let steps = (decision.best_epoch + 1) * steps_per_epoch;
    decision.normalized_epochs = normalized_epochs(steps, stopping.batch_size, plan.n_total)?;
    Ok(BeRun { model: best, decision, log })
}

/// Netcore checkpoint of the slow weights extended with fast weights, batch
/// norm state and input standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeCheckpoint {
    #[serde(flatten)]
    pub base: Checkpoint,
    pub fast: Vec<FastLayer>,
    pub batch_norm: bool,
    pub bn: Vec<BatchNorm>,
    pub standardizers: Vec<Standardizer>,
}

impl BeCheckpoint {
    pub fn from_model(model: &BatchEnsembleModel, meta: CheckpointMeta) -> Self {
        Self {
            base: Checkpoint::from_params(&model.slow, meta),
            fast: model.fast.layers.clone(),
            batch_norm: model.batch_norm,
            bn: model.norms.clone(),
            standardizers: model.standardizers.clone(),
        }
    }

    pub fn to_model(&self) -> Result<BatchEnsembleModel> {
        let mut model = BatchEnsembleModel::new(self.base.to_params()?, FastWeights { layers: self.fast.clone() }, self.batch_norm)?;
        if self.bn.len() != model.norms.len() || self.standardizers.len() != model.members() {
            return Err(Error::invalid("checkpoint batch norm or standardizer count does not match the model"));
        }
        model.norms = self.bn.clone();
        model.standardizers = self.standardizers.clone();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::mlp_forward;
    use crate::rng::rng_from_seed;

    fn inputs(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    /// Member `m` as a plain MLP with `W ∘ (r sᵀ)` written out entry by entry.
    fn materialize(model: &BatchEnsembleModel, m: usize) -> MlpParams {
        let mut p = model.slow.clone();
        for (layer, f) in p.layers.iter_mut().zip(&model.fast.layers) {
            for i in 0..layer.weight.rows() {
                for j in 0..layer.weight.cols() {
                    layer.weight[(i, j)] *= f.r[(m, i)] * f.s[(m, j)];
                }
            }
        }
        p
    }

    #[test]
    fn random_sign_entries_are_signs() {
        let f = init_fast(&[3, 5, 2], 4, FastInit::RandomSign, &mut rng_from_seed(1)).unwrap();
        let all: Vec<f64> = f.layers.iter().flat_map(|l| l.r.as_slice().iter().chain(l.s.as_slice())).copied().collect();
        assert!(all.iter().all(|&v| v == 1.0 || v == -1.0));
        assert!(all.contains(&1.0) && all.contains(&-1.0));
    }

    #[test]
    fn gaussian_moments() {
        let big = init_fast(&[5000, 5000], 1, FastInit::Gaussian { sigma: 0.5 }, &mut rng_from_seed(3)).unwrap();
        let v: Vec<f64> = big.layers[0].r.as_slice().iter().chain(big.layers[0].s.as_slice()).copied().collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 0.02 && (sd - 0.5).abs() < 0.02, "{mean} {sd}");
        assert!(init_fast(&[2, 2], 1, FastInit::Gaussian { sigma: 0.0 }, &mut rng_from_seed(4)).is_err());
    }

    #[test]
    fn tiny_sigma_makes_members_identical() {
        let mut rng = rng_from_seed(5);
        let model = BatchEnsembleModel::init(&[3, 6, 3], 3, FastInit::Gaussian { sigma: 1e-9 }, false, &mut rng).unwrap();
        let x = inputs(8, 3, &mut rng);
        let out = model.be_forward_all(&x).unwrap();
        for o in &out[1..] {
            for (a, b) in o.as_slice().iter().zip(out[0].as_slice()) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn unit_fast_weights_equal_the_slow_mlp() {
        let mut rng = rng_from_seed(6);
        let slow = MlpParams::init(&[4, 7, 5, 3], &mut rng).unwrap();
        let model = BatchEnsembleModel::new(slow.clone(), FastWeights::ones(&[4, 7, 5, 3], 3), false).unwrap();
        let x = inputs(9, 4, &mut rng);
        let expected = mlp_forward(&slow, &x).unwrap();
        for m in 0..3 {
            assert_eq!(model.be_forward(&x, m).unwrap(), expected);
        }
    }

    #[test]
    fn identity_batch_norm_keeps_members_identical() {
        let mut rng = rng_from_seed(7);
        let slow = MlpParams::init(&[2, 6, 3], &mut rng).unwrap();
        let model = BatchEnsembleModel::new(slow, FastWeights::ones(&[2, 6, 3], 4), true).unwrap();
        let out = model.be_forward_all(&inputs(5, 2, &mut rng)).unwrap();
        assert!(out.iter().all(|o| o == &out[0]));
    }

    #[test]
    fn matches_materialized_member_weights() {
        let mut rng = rng_from_seed(8);
        let model = BatchEnsembleModel::init(&[3, 8, 4], 3, FastInit::Gaussian { sigma: 0.5 }, false, &mut rng).unwrap();
        let x = inputs(10, 3, &mut rng);
        for m in 0..3 {
            let ours = model.be_forward(&x, m).unwrap();
            let oracle = mlp_forward(&materialize(&model, m), &x).unwrap();
            for (a, b) in ours.as_slice().iter().zip(oracle.as_slice()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sign_flipped_members_differ() {
        let mut rng = rng_from_seed(9);
        let mut model = BatchEnsembleModel::init(&[3, 5, 2], 2, FastInit::Gaussian { sigma: 0.5 }, false, &mut rng).unwrap();
        for layer in &mut model.fast.layers {
            let r0 = layer.r.row(0).to_vec();
            layer.r.row_mut(1).iter_mut().zip(&r0).for_each(|(a, b)| *a = -b);
        }
        let x = inputs(4, 3, &mut rng);
        assert_ne!(model.be_forward(&x, 0).unwrap(), model.be_forward(&x, 1).unwrap());
    }

    #[test]
    fn stacked_forward_equals_member_loop() {
        let mut rng = rng_from_seed(10);
        for bn in [false, true] {
            let mut model = BatchEnsembleModel::init(&[3, 6, 6, 4], 4, FastInit::RandomSign, bn, &mut rng).unwrap();
            for n in &mut model.norms {
                n.running_mean.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
                n.gamma.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            }
            let x = inputs(7, 3, &mut rng);
            let all = model.be_forward_all(&x).unwrap();
            for (m, out) in all.iter().enumerate() {
                assert_eq!(out, &model.be_forward(&x, m).unwrap());
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(11);
        for bn in [false, true] {
            let model = BatchEnsembleModel::init(&[3, 5, 4, 3], 3, FastInit::Gaussian { sigma: 0.5 }, bn, &mut rng).unwrap();
            let xs: Vec<Matrix> = (0..3).map(|m| inputs(4 + m, 3, &mut rng)).collect();
            let ys: Vec<Vec<usize>> = (0..3).map(|m| (0..4 + m).map(|i| (i + m) % 3).collect()).collect();
            let batches: Vec<(usize, &Matrix, &[usize])> = (0..3).map(|m| (m, &xs[m], ys[m].as_slice())).collect();
            let r = be_grad_check(&model, &batches, 1e-5).unwrap();
            assert!(r.checked() > model.num_params() / 2);
            assert!(r.max_rel_error < 1e-4, "bn={bn}: {:?}", r.worst());
        }
    }

    #[test]
    fn member_grads_only_touch_own_fast_weights() {
        let mut rng = rng_from_seed(12);
        let model = BatchEnsembleModel::init(&[2, 4, 2], 3, FastInit::RandomSign, true, &mut rng).unwrap();
        let x = inputs(5, 2, &mut rng);
        let y = vec![0, 1, 0, 1, 1];
        let (_, g) = model.loss_and_grad(&[(1, &x, &y)]).unwrap();
        for layer in &g.fast.layers {
            assert!(layer.r.row(0).iter().chain(layer.r.row(2)).all(|&v| v == 0.0));
            assert!(layer.r.row(1).iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_from_seed(13);
        let mut model = BatchEnsembleModel::init(&[2, 3, 2], 2, FastInit::Gaussian { sigma: 0.1 }, true, &mut rng).unwrap();
        model.norms[0].running_var[(1, 2)] = 0.123_456_789_012_345_67;
        model.standardizers[1] = Standardizer { mean: vec![0.1, -3.0], sd: vec![2.0, 0.7] };
        let ckpt = BeCheckpoint::from_model(&model, CheckpointMeta { seed: 3, epoch: 4 });
        let json = serde_json::to_string(&ckpt).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["arch", "layers", "meta", "fast", "bn"] {
            assert!(value.get(key).is_some(), "{key}");
        }
        let back: BeCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_model().unwrap(), model);
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        use crate::data::{make_dataset, TaskSpec};
        use crate::splits::{make_plan, Strategy};
        use crate::training::StopMode;
        let spec = TaskSpec::Blobs { classes: 3, n: 240, noise: 1.0, radius: 3.0, label_noise: 0.0, noise_dims: 0 };
        let d = make_dataset(&spec, &mut rng_from_seed(14)).unwrap();
        let data = TrainData::new(&d.x, &d.y).unwrap();
        let plan = make_plan(Strategy::Overlapping, 240, 0.1, 3, 2, Some(&d.y)).unwrap();
        let model = BatchEnsembleModel::init(&[2, 8, 3], 3, FastInit::RandomSign, true, &mut rng_from_seed(15)).unwrap();
        let mut stop = StoppingConfig::new(StopMode::Joint, 8);
        stop.batch_size = 32;
        let opt = OptimizerConfig::adam(1e-2, 0.0);
        let a = be_train(model.clone(), data, &plan, &opt, &stop, 5).unwrap();
        let b = be_train(model.clone(), data, &plan, &opt, &stop, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.decision.history[a.decision.best_epoch] < a.decision.history[0] || a.decision.best_epoch == 0);
        let single = BatchEnsembleModel::init(&[2, 8, 3], 1, FastInit::RandomSign, true, &mut rng_from_seed(15)).unwrap();
        let plan1 = make_plan(Strategy::Shared, 240, 0.1, 1, 2, Some(&d.y)).unwrap();
        assert!(be_train(single, data, &plan1, &opt, &stop, 5).is_ok());
        assert!(be_train(model, data, &plan1, &opt, &stop, 5).is_err());
    }
}
