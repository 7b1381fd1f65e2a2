//! Weight-decay grid search, selection under the single-model and ensemble
//! objectives, and the resulting optimality gap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{nll, MetricsRecord, ProbMatrix, RecordTags};
use crate::netcore::{Matrix, MlpParams, OptimizerConfig};
use crate::rng::{derive_seed, rng_from_seed, Purpose};
use crate::splits::{SplitPlan, Strategy};
use crate::training::{train_fixed, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    /// Strictly increasing, starting at 0.
    pub weight_decays: Vec<f64>,
    /// Members per ensemble; sizes `1..=ensemble_size` are scored.
    pub ensemble_size: usize,
    pub seeds: Vec<u64>,
}

impl HyperGrid {
    pub fn new(weight_decays: Vec<f64>, ensemble_size: usize, seeds: Vec<u64>) -> Result<Self> {
        let grid = Self { weight_decays, ensemble_size, seeds };
        grid.validate()?;
        Ok(grid)
    }

    /// `{0} ∪ {lo · (hi/lo)^(i/(count-1))}`.
    pub fn log_spaced(lo: f64, hi: f64, count: usize, ensemble_size: usize, seeds: Vec<u64>) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) || count == 0 {
            return Err(Error::invalid(format!("log-spaced grid needs 0 < lo <= hi and count >= 1, got ({lo}, {hi}, {count})")));
        }
        let mut wds = vec![0.0];
        for i in 0..count {
            let frac = if count == 1 { 0.0 } else { i as f64 / (count - 1) as f64 };
            wds.push(lo * (hi / lo).powf(frac));
        }
        Self::new(wds, ensemble_size, seeds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weight_decays.first() != Some(&0.0) {
            return Err(Error::invalid("weight-decay grid must start at 0"));
        }
        if self.weight_decays.windows(2).any(|w| !(w[1] > w[0])) || self.weight_decays.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("weight-decay grid must be finite and strictly increasing"));
        }
        if self.ensemble_size == 0 || self.seeds.is_empty() {
            return Err(Error::invalid("sweep needs at least one member and one seed"));
        }
        Ok(())
    }
}

/// Network shape and fixed-budget schedule for every sweep cell; the
/// optimizer's weight decay is replaced by the cell's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTraining {
    pub dims: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

/// One (weight decay, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub weight_decay: f64,
    pub seed: u64,
    /// Set when training produced a non-finite loss or parameters.
    pub diverged: Option<String>,
    /// Ensembles of the first `k` members, `k = 1..=M`, on val then test.
    pub records: Vec<MetricsRecord>,
    pub mean_member_val_nll: f64,
    pub mean_member_test_nll: f64,
    /// Validation NLL of member 0 alone.
    pub single_val_nll: f64,
}

impl SweepCell {
    pub fn record(&self, split: &str, k: usize) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.split == split && r.ensemble_size == k)
    }

    fn ok(&self) -> bool {
        self.diverged.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean member validation NLL.
    Individual,
    /// Validation NLL of a single model (member 0).
    SingleModel,
    /// Validation NLL of the full ensemble.
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub gap: f64,
    pub sem: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub h_ind: f64,
    pub h_ens: f64,
    pub gap: f64,
    pub gap_sem: f64,
    pub individual_objective: Objective,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub grid: HyperGrid,
    pub cells: Vec<SweepCell>,
    pub summary: SweepSummary,
}

fn tags(plan: &SplitPlan, seed: u64, k: usize, wd: f64, split: &str) -> RecordTags {
    RecordTags {
        strategy: plan.strategy.to_string(),
        val_pct: 100.0 * plan.members[0].val.len() as f64 / plan.n_total as f64,
        seed,
        ensemble_size: k,
        experiment: "wd_sweep".into(),
        variant: format!("wd={wd}"),
        split: split.into(),
    }
}

fn run_cell(
    wd: f64,
    seed: u64,
    m_count: usize,
    data: TrainData<'_>,
    test: (&Matrix, &[usize]),
    plan: &SplitPlan,
    training: &SweepTraining,
) -> Result<SweepCell> {
    let opt = OptimizerConfig { weight_decay: wd, ..training.optimizer };
    let mut val_probs = Vec::with_capacity(m_count);
    let mut test_probs = Vec::with_capacity(m_count);
    let val_idx = &plan.members[0].val;
    let val_x = data.x.select_rows(val_idx);
    let val_y = data.labels(val_idx);
    for m in 0..m_count {
        let init = MlpParams::init(&training.dims, &mut rng_from_seed(derive_seed(seed, m as u64, Purpose::Init)))?;
        let shuffle = derive_seed(seed, m as u64, Purpose::Shuffle);
        let trained = train_fixed(init, data, &plan.members[m].train, &opt, training.epochs, training.batch_size, shuffle);
        let member = match trained {
            Ok(member) => member,
            Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFinite(_))) => {
                log::warn!("weight decay {wd}, seed {seed}: member {m} diverged ({e}); cell excluded");
                return Ok(SweepCell {
                    weight_decay: wd,
                    seed,
                    diverged: Some(format!("member {m}: {e}")),
                    records: Vec::new(),
                    mean_member_val_nll: f64::NAN,
                    mean_member_test_nll: f64::NAN,
                    single_val_nll: f64::NAN,
                });
            }
            Err(e) => return Err(e),
        };
        val_probs.push(member.probs(&val_x)?);
        test_probs.push(member.probs(test.0)?);
    }
    let mean_nll = |probs: &[ProbMatrix], y: &[usize]| -> Result<f64> {
        Ok(probs.iter().map(|p| nll(p, y)).sum::<Result<f64>>()? / probs.len() as f64)
    };
    let mut records = Vec::with_capacity(2 * m_count);
    for (split, probs, y) in [("val", &val_probs, val_y.as_slice()), ("test", &test_probs, test.1)] {
        for k in 1..=m_count {
            records.push(MetricsRecord::evaluate(&probs[..k], None, y, tags(plan, seed, k, wd, split), None)?);
        }
    }
    Ok(SweepCell {
        weight_decay: wd,
        seed,
        diverged: None,
        records,
        mean_member_val_nll: mean_nll(&val_probs, &val_y)?,
        mean_member_test_nll: mean_nll(&test_probs, test.1)?,
        single_val_nll: nll(&val_probs[0], &val_y)?,
    })
}

/// Trains `M` members per (weight decay, seed) cell for a fixed budget on a
/// shared-holdout plan and scores ensembles of the first `k` members.
///
/// Member initializations depend on the seed only, so cells at different
/// weight decays are paired.
pub fn run_sweep(
    grid: &HyperGrid,
    data: TrainData<'_>,
    test: (&Matrix, &[usize]),
    plan_for: impl Fn(u64) -> Result<SplitPlan> + Sync,
    training: &SweepTraining,
    individual_objective: Objective,
) -> Result<SweepResult> {
    grid.validate()?;
    let plans: Vec<SplitPlan> = grid.seeds.iter().map(|&s| plan_for(s)).collect::<Result<_>>()?;
    for plan in &plans {
        if plan.strategy != Strategy::Shared {
            return Err(Error::invalid(format!("weight-decay sweep needs a shared plan, got {}", plan.strategy)));
        }
        if plan.members.len() != grid.ensemble_size {
            return Err(Error::dims("plan members", grid.ensemble_size, plan.members.len()));
        }
    }
    let jobs: Vec<(f64, usize)> = grid
        .weight_decays
        .iter()
        .flat_map(|&wd| (0..grid.seeds.len()).map(move |i| (wd, i)))
        .collect();
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(wd, i)| {
            let seed = grid.seeds[i];
            run_cell(wd, seed, grid.ensemble_size, data, test, &plans[i], training)
                .map_err(|e| e.context(format!("weight decay {wd}, seed {seed}")))
        })
        .collect::<Result<_>>()?;
    let h_ind = select_h(&cells, individual_objective, grid.ensemble_size)?;
    let h_ens = select_h(&cells, Objective::Ensemble, grid.ensemble_size)?;
    let gap = optimality_gap(&cells, h_ind, h_ens, grid.ensemble_size)?;
    Ok(SweepResult {
        grid: grid.clone(),
        cells,
        summary: SweepSummary {
            h_ind,
            h_ens,
            gap: gap.gap,
            gap_sem: gap.sem,
            individual_objective,
            n_seeds: gap.n_seeds,
        },
    })
}

fn objective_value(cell: &SweepCell, objective: Objective, m: usize) -> Option<f64> {
    match objective {
        Objective::Individual => Some(cell.mean_member_val_nll),
        Objective::SingleModel => Some(cell.single_val_nll),
        Objective::Ensemble => cell.record("val", m).map(|r| r.nll),
    }
}

/// Seed-ordered values so sums do not depend on the order cells arrive in.
fn by_seed(mut pairs: Vec<(u64, f64)>) -> Vec<f64> {
    pairs.sort_by_key(|p| p.0);
    pairs.into_iter().map(|p| p.1).collect()
}

/// Weight decay minimizing the seed-mean validation objective; exact ties go
/// to the larger weight decay. Diverged cells are ignored.
pub fn select_h(cells: &[SweepCell], objective: Objective, ensemble_size: usize) -> Result<f64> {
    let mut wds: Vec<f64> = cells.iter().filter(|c| c.ok()).map(|c| c.weight_decay).collect();
    wds.sort_by(f64::total_cmp);
    wds.dedup();
    let mut best: Option<(f64, f64)> = None;
    for wd in wds {
        let values = by_seed(
            cells
                .iter()
                .filter(|c| c.ok() && c.weight_decay == wd)
                .filter_map(|c| objective_value(c, objective, ensemble_size).map(|v| (c.seed, v)))
                .collect(),
        );
        if values.is_empty() {
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        if best.is_none_or(|(_, b)| mean <= b) {
            best = Some((wd, mean));
        }
    }
    best.map(|(wd, _)| wd).ok_or_else(|| Error::invalid("no usable sweep cells to select from"))
}

/// Mean and SEM over `values` (sample standard deviation; SEM 0 for one value).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Seed-paired difference of full-ensemble test NLL at `h_ind` and at `h_ens`.
pub fn optimality_gap(cells: &[SweepCell], h_ind: f64, h_ens: f64, ensemble_size: usize) -> Result<Gap> {
    let test_nll = |wd: f64, seed: u64| {
        cells
            .iter()
            .find(|c| c.ok() && c.weight_decay == wd && c.seed == seed)
            .and_then(|c| c.record("test", ensemble_size))
            .map(|r| r.nll)
    };
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let diffs: Vec<f64> = seeds
        .into_iter()
        .filter_map(|s| Some(test_nll(h_ind, s)? - test_nll(h_ens, s)?))
        .collect();
    if diffs.is_empty() {
        return Err(Error::invalid(format!("no seed has test cells at both h_ind = {h_ind} and h_ens = {h_ens}")));
    }
    let (gap, sem) = mean_sem(&diffs);
    Ok(Gap { gap, sem, n_seeds: diffs.len() })
}

#[derive(Debug, Serialize)]
struct CellRow<'a> {
    weight_decay: f64,
    seed: u64,
    ensemble_size: usize,
    split: &'a str,
    status: &'a str,
    error_pct: f64,
    nll: f64,
    ece: f64,
    diversity: f64,
    entropy: f64,
    mean_member_nll: f64,
}

/// Cell-level CSV: one row per (weight decay, seed, size, split); diverged
/// cells get a single `diverged` row.
pub fn write_cells_csv<W: std::io::Write>(cells: &[SweepCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        if let Some(_reason) = &c.diverged {
            w.serialize(CellRow {
                weight_decay: c.weight_decay,
                seed: c.seed,
                ensemble_size: 0,
                split: "",
                status: "diverged",
                error_pct: f64::NAN,
                nll: f64::NAN,
                ece: f64::NAN,
                diversity: f64::NAN,
                entropy: f64::NAN,
                mean_member_nll: f64::NAN,
            })?;
            continue;
        }
        for r in &c.records {
            let member_nll = if r.split == "val" { c.mean_member_val_nll } else { c.mean_member_test_nll };
            w.serialize(CellRow {
                weight_decay: c.weight_decay,
                seed: c.seed,
                ensemble_size: r.ensemble_size,
                split: &r.split,
                status: "ok",
                error_pct: r.error_pct,
                nll: r.nll,
                ece: r.ece,
                diversity: r.diversity,
                entropy: r.entropy,
                mean_member_nll: member_nll,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
