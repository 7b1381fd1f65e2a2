//! Member training loops and early stopping.
//!
//! Individual stopping runs one patience counter per member on its own
//! validation NLL. Joint stopping trains all members in lockstep and stops
//! them together on the NLL of their averaged prediction.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::metrics::{ensemble_mean, nll, ProbMatrix};
use crate::netcore::{cosine_lr, loss_and_grad, Matrix, MlpParams, OptimizerConfig, OptimizerState};
use crate::rng::{rng_from_seed, Rng};
use crate::splits::{joint_eval_sets, MemberSplit, SplitPlan};

pub const DEFAULT_PATIENCE: usize = 10;
pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    Individual,
    Joint,
}

impl StopMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StopMode::Individual => "individual",
            StopMode::Joint => "joint",
        }
    }
}

fn default_patience() -> usize {
    DEFAULT_PATIENCE
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

/// Early stopping on validation NLL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingConfig {
    pub mode: StopMode,
    #[serde(default = "default_patience")]
    pub patience: usize,
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Joint mode on a disjoint plan monitors the mean of the members' own
    /// validation NLLs instead of failing.
    #[serde(default)]
    pub disjoint_fallback: bool,
}

impl StoppingConfig {
    pub fn new(mode: StopMode, max_epochs: usize) -> Self {
        Self {
            mode,
            patience: DEFAULT_PATIENCE,
            max_epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            disjoint_fallback: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(format!(
                "patience ({}), max_epochs ({}) and batch_size ({}) must be >= 1",
                self.patience, self.max_epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    /// Last epoch trained (0-based).
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    /// False when training ran out of epochs before patience was exhausted.
    pub stopped: bool,
    pub normalized_epochs: f64,
    pub history: Vec<f64>,
}

/// Online patience counter. Improvement means strictly lower score.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    history: Vec<f64>,
    best_epoch: usize,
    best_score: f64,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            history: Vec::new(),
            best_epoch: 0,
            best_score: f64::INFINITY,
        }
    }

    /// Records the next epoch's score; returns `(improved, should_stop)`.
    pub fn push(&mut self, score: f64) -> (bool, bool) {
        let epoch = self.history.len();
        self.history.push(score);
        let improved = epoch == 0 || score < self.best_score;
        if improved {
            self.best_epoch = epoch;
            self.best_score = score;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn decision(&self, stopped: bool) -> StopDecision {
        StopDecision {
            stop_epoch: self.history.len().saturating_sub(1),
            best_epoch: self.best_epoch,
            best_score: self.best_score,
            stopped,
            normalized_epochs: 0.0,
            history: self.history.clone(),
        }
    }
}

/// Walks `history` with the patience rule and reports where training stops.
pub fn stop_controller(history: &[f64], patience: usize) -> Result<StopDecision> {
    if history.is_empty() {
        return Err(Error::invalid("empty score history"));
    }
    if patience == 0 {
        return Err(Error::invalid("patience must be >= 1"));
    }
    let mut stopper = EarlyStopper::new(patience);
    for &score in history {
        if stopper.push(score).1 {
            return Ok(stopper.decision(true));
        }
    }
    Ok(stopper.decision(false))
}

/// `steps · batch_size / n_total`.
pub fn normalized_epochs(steps: usize, batch_size: usize, n_total: usize) -> Result<f64> {
    if n_total == 0 {
        return Err(Error::invalid("normalized epochs with an empty D'"));
    }
    Ok(steps as f64 * batch_size as f64 / n_total as f64)
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

/// Features and labels of D′; split plans index into these rows.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

impl<'a> TrainData<'a> {
    pub fn new(x: &'a Matrix, y: &'a [usize]) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dims("training labels", x.rows(), y.len()));
        }
        Ok(Self { x, y })
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }
}

/// A trained network with the input standardization fitted on its own
/// training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub standardizer: Standardizer,
    pub params: MlpParams,
}

impl Member {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.params.forward(&self.standardizer.apply(x)?)
    }

    pub fn probs(&self, x: &Matrix) -> Result<ProbMatrix> {
        Ok(ProbMatrix::from_logits(&self.logits(x)?))
    }
}

/// Training state of one member inside a loop.
struct Trainer {
    xs: Matrix,
    train: Vec<usize>,
    params: MlpParams,
    state: OptimizerState,
    rng: Rng,
    steps: usize,
}

impl Trainer {
    fn new(data: TrainData<'_>, train: &[usize], init: MlpParams, opt: &OptimizerConfig, seed: u64) -> Result<(Self, Standardizer)> {
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if init.input_dim() != data.x.cols() {
            return Err(Error::dims("network input", data.x.cols(), init.input_dim()));
        }
        let standardizer = Standardizer::fit(data.x, train)?;
        let xs = standardizer.apply(data.x)?;
        let trainer = Self {
            xs,
            train: train.to_vec(),
            params: init,
            state: OptimizerState::new(*opt)?,
            rng: rng_from_seed(seed),
            steps: 0,
        };
        Ok((trainer, standardizer))
    }

    /// One pass over reshuffled mini-batches; the last partial batch is kept.
    fn epoch(&mut self, y: &[usize], batch_size: usize, lr: impl Fn(usize) -> f64) -> Result<()> {
        self.train.shuffle(&mut self.rng);
        for batch in self.train.chunks(batch_size) {
            let xb = self.xs.select_rows(batch);
            let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let (_, grad) = loss_and_grad(&self.params, &xb, &yb)?;
            self.state.step(&mut self.params, &grad, lr(self.steps))?;
            self.steps += 1;
        }
        if !self.params.is_finite() {
            return Err(Error::NonFinite("parameters after epoch".into()));
        }
        Ok(())
    }

    fn probs(&self, idx: &[usize]) -> Result<ProbMatrix> {
        Ok(ProbMatrix::from_logits(&self.params.forward(&self.xs.select_rows(idx))?))
    }

    fn val_nll(&self, y: &[usize], idx: &[usize]) -> Result<f64> {
        let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        nll(&self.probs(idx)?, &labels)
    }
}

/// One line of the per-epoch monitoring log; `member = None` is the ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorRow {
    pub epoch: usize,
    pub member: Option<usize>,
    pub nll: f64,
}

pub fn write_monitor_csv<W: std::io::Write>(rows: &[MonitorRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "member_id", "split", "nll"])?;
    for r in rows {
        let member = r.member.map_or_else(|| "ensemble".to_string(), |m| m.to_string());
        w.write_record([r.epoch.to_string(), member, "val".into(), r.nll.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("monitor log", e))?;
    Ok(())
}

/// Trains one member with a constant learning rate, stopping on its own
/// validation NLL, and restores the best epoch's parameters.
///
/// `n_total` is |D′| for step normalization; `seed` drives batch order.
pub fn train_member(
    init: MlpParams,
    data: TrainData<'_>,
    split: &MemberSplit,
    opt: &OptimizerConfig,
    stopping: &StoppingConfig,
    n_total: usize,
    seed: u64,
) -> Result<(Member, StopDecision)> {
    stopping.validate()?;
    if split.val.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let (mut t, standardizer) = Trainer::new(data, &split.train, init, opt, seed)?;
    let mut stopper = EarlyStopper::new(stopping.patience);
    let mut best = t.params.clone();
    let mut stopped = false;
    for _ in 0..stopping.max_epochs {
        t.epoch(data.y, stopping.batch_size, |_| opt.base_lr)?;
        let (improved, stop) = stopper.push(t.val_nll(data.y, &split.val)?);
        if improved {
            best = t.params.clone();
        }
        if stop {
            stopped = true;
            break;
        }
    }
    let mut decision = stopper.decision(stopped);
    let steps = (decision.best_epoch + 1) * steps_per_epoch(split.train.len(), stopping.batch_size);
    decision.normalized_epochs = normalized_epochs(steps, stopping.batch_size, n_total)?;
    Ok((Member { standardizer, params: best }, decision))
}

/// Trained ensemble with its stop decisions: one shared decision in joint
/// mode, one per member in individual mode.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub members: Vec<Member>,
    pub mode: StopMode,
    pub decisions: Vec<StopDecision>,
    pub log: Vec<MonitorRow>,
}

impl EnsembleRun {
    /// Joint: the shared value. Individual: the member mean.
    pub fn normalized_epochs(&self) -> f64 {
        self.decisions.iter().map(|d| d.normalized_epochs).sum::<f64>() / self.decisions.len() as f64
    }

    pub fn member_probs(&self, x: &Matrix) -> Result<Vec<ProbMatrix>> {
        self.members.iter().map(|m| m.probs(x)).collect()
    }

    pub fn member_logits(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        self.members.iter().map(|m| m.logits(x)).collect()
    }

    pub fn predict(&self, x: &Matrix) -> Result<ProbMatrix> {
        ensemble_mean(&self.member_probs(x)?)
    }
}

/// The joint stopping score: mean over joint sets of the NLL of the members'
/// averaged prediction on that set. With no joint sets (disjoint plans), the
/// mean of each member's NLL on its own validation rows.
pub fn joint_score(member_probs_on: impl Fn(usize, &[usize]) -> Result<ProbMatrix>, plan: &SplitPlan, y: &[usize]) -> Result<f64> {
    let sets = joint_eval_sets(plan);
    if sets.is_empty() {
        let mut total = 0.0;
        for (m, split) in plan.members.iter().enumerate() {
            let labels: Vec<usize> = split.val.iter().map(|&i| y[i]).collect();
            total += nll(&member_probs_on(m, &split.val)?, &labels)?;
        }
        return Ok(total / plan.members.len() as f64);
    }
    let mut total = 0.0;
    for set in &sets {
        let probs: Vec<ProbMatrix> = set
            .members
            .iter()
            .map(|&m| member_probs_on(m, &set.indices))
            .collect::<Result<_>>()?;
        let labels: Vec<usize> = set.indices.iter().map(|&i| y[i]).collect();
        total += nll(&ensemble_mean(&probs)?, &labels)?;
    }
    Ok(total / sets.len() as f64)
}

/// Trains `inits.len()` members on `plan` with early stopping.
///
/// `seeds[m]` drives member `m`'s batch order. Members train in parallel;
/// joint mode synchronizes after every epoch.
pub fn train_ensemble(
    inits: Vec<MlpParams>,
    data: TrainData<'_>,
    plan: &SplitPlan,
    opt: &OptimizerConfig,
    stopping: &StoppingConfig,
    seeds: &[u64],
) -> Result<EnsembleRun> {
    stopping.validate()?;
    let m_count = plan.members.len();
    if inits.len() != m_count || seeds.len() != m_count {
        return Err(Error::dims("ensemble members", m_count, inits.len().min(seeds.len())));
    }
    if data.x.rows() != plan.n_total {
        return Err(Error::dims("plan size", plan.n_total, data.x.rows()));
    }
    match stopping.mode {
        StopMode::Individual => {
            let results: Vec<(Member, StopDecision)> = inits
                .into_par_iter()
                .enumerate()
                .map(|(m, init)| {
                    train_member(init, data, &plan.members[m], opt, stopping, plan.n_total, seeds[m])
                        .map_err(|e| e.context(format!("member {m}")))
                })
                .collect::<Result<_>>()?;
            let mut log = Vec::new();
            for (m, (_, d)) in results.iter().enumerate() {
                log.extend(d.history.iter().enumerate().map(|(epoch, &nll)| MonitorRow { epoch, member: Some(m), nll }));
            }
            log.sort_by_key(|r| (r.epoch, r.member));
            let (members, decisions) = results.into_iter().unzip();
            Ok(EnsembleRun { members, mode: StopMode::Individual, decisions, log })
        }
        StopMode::Joint => train_joint(inits, data, plan, opt, stopping, seeds),
    }
}

fn train_joint(
    inits: Vec<MlpParams>,
    data: TrainData<'_>,
    plan: &SplitPlan,
    opt: &OptimizerConfig,
    stopping: &StoppingConfig,
    seeds: &[u64],
) -> Result<EnsembleRun> {
    if joint_eval_sets(plan).is_empty() && !stopping.disjoint_fallback {
        return Err(Error::NoJointSet { strategy: plan.strategy.to_string() });
    }
    let mut trainers = Vec::with_capacity(inits.len());
    let mut standardizers = Vec::with_capacity(inits.len());
    for (m, init) in inits.into_iter().enumerate() {
        if plan.members[m].val.is_empty() {
            return Err(Error::invalid(format!("member {m} has an empty validation set")));
        }
        let (t, s) = Trainer::new(data, &plan.members[m].train, init, opt, seeds[m])?;
        trainers.push(t);
        standardizers.push(s);
    }
    let mut stopper = EarlyStopper::new(stopping.patience);
    let mut best: Vec<MlpParams> = trainers.iter().map(|t| t.params.clone()).collect();
    let mut log = Vec::new();
    let mut stopped = false;
    for epoch in 0..stopping.max_epochs {
        trainers
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(m, t)| {
                t.epoch(data.y, stopping.batch_size, |_| opt.base_lr)
                    .map_err(|e| e.context(format!("member {m}")))
            })?;
        for (m, t) in trainers.iter().enumerate() {
            log.push(MonitorRow { epoch, member: Some(m), nll: t.val_nll(data.y, &plan.members[m].val)? });
        }
        let score = joint_score(|m, idx| trainers[m].probs(idx), plan, data.y)?;
        log.push(MonitorRow { epoch, member: None, nll: score });
        let (improved, stop) = stopper.push(score);
        if improved {
            for (b, t) in best.iter_mut().zip(&trainers) {
                b.clone_from(&t.params);
            }
        }
        if stop {
            stopped = true;
            break;
        }
    }
    let mut decision = stopper.decision(stopped);
    // Members may hold different amounts of data; report the mean.
    let mut total = 0.0;
    for split in &plan.members {
        let steps = (decision.best_epoch + 1) * steps_per_epoch(split.train.len(), stopping.batch_size);
        total += normalized_epochs(steps, stopping.batch_size, plan.n_total)?;
    }
    decision.normalized_epochs = total / plan.members.len() as f64;
    let members = standardizers
        .into_iter()
        .zip(best)
        .map(|(standardizer, params)| Member { standardizer, params })
        .collect();
    Ok(EnsembleRun { members, mode: StopMode::Joint, decisions: vec![decision], log })
}

/// Trains for a fixed number of epochs under a cosine schedule over all steps.
pub fn train_fixed(
    init: MlpParams,
    data: TrainData<'_>,
    train: &[usize],
    opt: &OptimizerConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Member> {
    if epochs == 0 || batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be >= 1"));
    }
    let (mut t, standardizer) = Trainer::new(data, train, init, opt, seed)?;
    let total = epochs * steps_per_epoch(train.len(), batch_size);
    for _ in 0..epochs {
        t.epoch(data.y, batch_size, |s| cosine_lr(opt.base_lr, s, total))?;
    }
    Ok(Member { standardizer, params: t.params })
}
