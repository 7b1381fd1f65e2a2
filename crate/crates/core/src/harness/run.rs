//! Seeded experiment runs, the run manifest, and reruns from a manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use super::report::write_report;
use crate::batchensemble::{be_train, init_fast, BatchEnsembleModel, FastInit};
use crate::calibration::{
    apply_pool, calibrate_individual, calibrate_joint, calibrate_pool, predict_individual, predict_joint, CalibrationMode,
    JointValSet, LabeledLogits, TempFitResult,
};
use crate::data::{make_dataset, split_test, Dataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{ensemble_mean, write_records_csv, MetricsRecord, ProbMatrix, RecordTags};
use crate::netcore::{Matrix, MlpParams, OptimizerConfig};
use crate::rng::{derive_rng, derive_seed, Purpose};
use crate::splits::{joint_eval_sets, make_plan, SplitPlan, Strategy};
use crate::training::{
    train_ensemble, train_fixed, write_monitor_csv, Member, MonitorRow, StopDecision, StopMode, StoppingConfig, TrainData,
};
use crate::tuning::{run_sweep, write_cells_csv, HyperGrid, SweepSummary, SweepTraining};

pub const WORKERS_ENV: &str = "ENSGAP_WORKERS";

/// Worker threads from `ENSGAP_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                log::warn!("ignoring {WORKERS_ENV}={v:?}; using {default} workers");
                default
            }
        },
        Err(_) => default,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub variant: String,
    pub fit: TempFitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStop {
    pub variant: String,
    /// One decision for joint stopping, one per member for individual.
    pub decisions: Vec<StopDecision>,
}

/// One (seed, strategy, val_pct) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub strategy: Strategy,
    pub val_pct: f64,
    pub plan: String,
    pub fits: Vec<NamedFit>,
    pub stops: Vec<NamedStop>,
    pub monitor_logs: Vec<String>,
    /// Arms that do not apply to this plan, with the reason.
    pub skipped: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub val_pct: f64,
    pub summary: Option<SweepSummary>,
    pub cells_csv: Option<String>,
    pub summary_json: Option<String>,
    pub diverged_cells: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub runs: Vec<RunEntry>,
    pub sweeps: Vec<SweepEntry>,
    /// Paths below are relative to the output directory.
    pub metrics_csv: String,
    pub aggregate_csv: String,
    pub plot_files: Vec<String>,
    pub workers: usize,
    pub wall_clock_secs: f64,
    pub complete: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count() + self.sweeps.iter().filter(|s| s.error.is_some()).count()
    }
}

/// D′ and the fixed test set.
pub struct Prepared {
    pub pool: Dataset,
    pub test: Dataset,
    pub pool_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Builds the dataset and the test split, both fixed by `data_seed`.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let data = make_dataset(&config.task, &mut derive_rng(config.data_seed, 0, Purpose::Data))?;
    let (pool_idx, test_idx) = split_test(&data, config.test_fraction, &mut derive_rng(config.data_seed, 0, Purpose::TestSplit))?;
    Ok(Prepared { pool: data.subset(&pool_idx), test: data.subset(&test_idx), pool_idx, test_idx })
}

impl Prepared {
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData { x: &self.pool.x, y: &self.pool.y }
    }

    /// Network shape `[features, hidden…, classes]`.
    pub fn dims(&self, config: &ExperimentConfig) -> Vec<usize> {
        let mut dims = vec![self.pool.features()];
        dims.extend(&config.model.hidden);
        dims.push(self.pool.n_classes);
        dims
    }

    /// Split plan over D′ for one run, checked against the test set.
    pub fn plan(&self, config: &ExperimentConfig, seed: u64, strategy: Strategy, val_pct: f64) -> Result<SplitPlan> {
        let plan = make_plan(
            strategy,
            self.pool.len(),
            val_pct,
            config.ensemble_size,
            derive_seed(seed, 0, Purpose::Plan),
            Some(&self.pool.y),
        )?;
        plan.validate()?;
        for split in &plan.members {
            for &i in split.train.iter().chain(&split.val) {
                if self.test_idx.binary_search(&self.pool_idx[i]).is_ok() {
                    return Err(Error::Split(format!("test index {} leaked into a member split", self.pool_idx[i])));
                }
            }
        }
        Ok(plan)
    }
}

/// Member initializations for a seed; independent of strategy and arm so
/// arms are paired.
pub fn member_inits(dims: &[usize], seed: u64, members: usize) -> Result<Vec<MlpParams>> {
    (0..members)
        .map(|m| MlpParams::init(dims, &mut derive_rng(seed, m as u64, Purpose::Init)))
        .collect()
}

pub fn shuffle_seeds(seed: u64, members: usize) -> Vec<u64> {
    (0..members).map(|m| derive_seed(seed, m as u64, Purpose::Shuffle)).collect()
}

struct Job<'a> {
    config: &'a ExperimentConfig,
    prep: &'a Prepared,
    seed: u64,
    strategy: Strategy,
    val_pct: f64,
    plan: SplitPlan,
}

struct JobOutput {
    records: Vec<MetricsRecord>,
    fits: Vec<NamedFit>,
    stops: Vec<NamedStop>,
    monitors: Vec<(String, Vec<MonitorRow>)>,
    skipped: Vec<String>,
}

impl JobOutput {
    fn new() -> Self {
        Self { records: Vec::new(), fits: Vec::new(), stops: Vec::new(), monitors: Vec::new(), skipped: Vec::new() }
    }
}

fn fmt_pct(val_pct: f64) -> String {
    format!("{val_pct}")
}

impl Job<'_> {
    fn tags(&self, variant: &str, split: &str) -> RecordTags {
        RecordTags {
            strategy: self.strategy.to_string(),
            val_pct: 100.0 * self.val_pct,
            seed: self.seed,
            ensemble_size: self.config.ensemble_size,
            experiment: self.config.experiment.as_str().into(),
            variant: variant.into(),
            split: split.into(),
        }
    }

    fn name(&self) -> String {
        format!("s{}_{}_v{}", self.seed, self.strategy, fmt_pct(self.val_pct))
    }

    fn data(&self) -> TrainData<'_> {
        self.prep.train_data()
    }

    fn test(&self) -> (&Matrix, &[usize]) {
        (&self.prep.test.x, &self.prep.test.y)
    }

    fn stopping(&self, mode: StopMode) -> StoppingConfig {
        let t = &self.config.train;
        StoppingConfig {
            mode,
            patience: t.patience,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            disjoint_fallback: self.config.stopping.disjoint_fallback,
        }
    }

    fn opt(&self) -> OptimizerConfig {
        self.config.train.optimizer_config()
    }

    fn run(&self) -> Result<JobOutput> {
        match self.config.experiment {
            ExperimentKind::TempScale => self.temp_scale(),
            ExperimentKind::EarlyStop => self.early_stop(),
            ExperimentKind::StopThenScale => self.stop_then_scale(),
            ExperimentKind::BatchEnsemble => self.batch_ensemble(),
            ExperimentKind::WdSweep => unreachable!("sweeps run per val_pct"),
        }
    }

    /// Per joint set, each member's logits on the set's rows.
    fn joint_sets(&self, members: &[Member]) -> Result<Vec<JointValSet>> {
        let data = self.data();
        joint_eval_sets(&self.plan)
            .into_iter()
            .map(|set| {
                let x = data.x.select_rows(&set.indices);
                let logits = set.members.iter().map(|&m| members[m].logits(&x)).collect::<Result<Vec<_>>>()?;
                JointValSet::new(logits, data.labels(&set.indices))
            })
            .collect()
    }

    fn temp_scale(&self) -> Result<JobOutput> {
        let mut out = JobOutput::new();
        let dims = self.prep.dims(self.config);
        let m_count = self.config.ensemble_size;
        let inits = member_inits(&dims, self.seed, m_count)?;
        let seeds = shuffle_seeds(self.seed, m_count);
        let t = &self.config.train;
        let members: Vec<Member> = inits
            .into_par_iter()
            .enumerate()
            .map(|(m, init)| train_fixed(init, self.data(), &self.plan.members[m].train, &self.opt(), t.epochs, t.batch_size, seeds[m]))
            .collect::<Result<_>>()?;
        let (tx, ty) = self.test();
        let test_logits: Vec<Matrix> = members.iter().map(|m| m.logits(tx)).collect::<Result<_>>()?;
        let joint = self.joint_sets(&members)?;
        for &mode in &self.config.calibration.modes {
            let variant = mode.as_str();
            let (member_probs, combined, fit) = match mode {
                CalibrationMode::None => (test_logits.iter().map(ProbMatrix::from_logits).collect::<Vec<_>>(), None, None),
                CalibrationMode::Individual => {
                    let sets: Vec<LabeledLogits> = members
                        .iter()
                        .zip(&self.plan.members)
                        .map(|(m, s)| LabeledLogits::new(m.logits(&self.data().x.select_rows(&s.val))?, self.data().labels(&s.val)))
                        .collect::<Result<_>>()?;
                    let fit = calibrate_individual(&sets)?;
                    let probs = test_logits
                        .iter()
                        .zip(&fit.temperatures)
                        .map(|(z, &temp)| ProbMatrix::from_logits(&z.map(|v| v / temp)))
                        .collect();
                    let combined = predict_individual(&test_logits, &fit.temperatures)?;
                    (probs, Some(combined), Some(fit))
                }
                CalibrationMode::Joint => {
                    if joint.is_empty() {
                        out.skipped.push(format!("{variant}: no joint validation set on a {} plan", self.strategy));
                        continue;
                    }
                    let fit = calibrate_joint(&joint)?;
                    let temp = fit.temperatures[0];
                    let probs = test_logits.iter().map(|z| ProbMatrix::from_logits(&z.map(|v| v / temp))).collect();
                    (probs, Some(predict_joint(&test_logits, temp)?), Some(fit))
                }
                CalibrationMode::Pool => {
                    if joint.is_empty() {
                        out.skipped.push(format!("{variant}: no joint validation set on a {} plan", self.strategy));
                        continue;
                    }
                    let mut pooled = Vec::new();
                    let mut labels = Vec::new();
                    for set in &joint {
                        pooled.push(predict_joint(&set.member_logits, 1.0)?.into_matrix());
                        labels.extend(&set.labels);
                    }
                    let pooled = ProbMatrix::new(Matrix::vstack(&pooled)?)?;
                    let fit = calibrate_pool(&pooled, &labels)?;
                    let plain: Vec<ProbMatrix> = test_logits.iter().map(ProbMatrix::from_logits).collect();
                    let combined = apply_pool(&ensemble_mean(&plain)?, fit.temperatures[0])?;
                    (plain, Some(combined), Some(fit))
                }
            };
            out.records.push(MetricsRecord::evaluate(&member_probs, combined.as_ref(), ty, self.tags(variant, "test"), None)?);
            if let Some(fit) = fit {
                out.fits.push(NamedFit { variant: variant.into(), fit });
            }
        }
        Ok(out)
    }

    fn early_stop(&self) -> Result<JobOutput> {
        let mut out = JobOutput::new();
        let dims = self.prep.dims(self.config);
        let m_count = self.config.ensemble_size;
        let (tx, ty) = self.test();
        for &mode in &self.config.stopping.modes {
            let variant = mode.as_str();
            let stopping = self.stopping(mode);
            if mode == StopMode::Joint && self.strategy == Strategy::Disjoint && !stopping.disjoint_fallback {
                out.skipped.push(format!("{variant}: no joint validation set on a disjoint plan"));
                continue;
            }
            let run = train_ensemble(
                member_inits(&dims, self.seed, m_count)?,
                self.data(),
                &self.plan,
                &self.opt(),
                &stopping,
                &shuffle_seeds(self.seed, m_count),
            )?;
            let probs = run.member_probs(tx)?;
            out.records.push(MetricsRecord::evaluate(&probs, None, ty, self.tags(variant, "test"), Some(run.normalized_epochs()))?);
            out.stops.push(NamedStop { variant: variant.into(), decisions: run.decisions });
            out.monitors.push((format!("monitor_{}_{variant}.csv", self.name()), run.log));
        }
        Ok(out)
    }

    fn stop_then_scale(&self) -> Result<JobOutput> {
        let mut out = JobOutput::new();
        if self.strategy == Strategy::Disjoint {
            out.skipped.push("joint stopping and joint scaling need a joint validation set".into());
            return Ok(out);
        }
        let dims = self.prep.dims(self.config);
        let m_count = self.config.ensemble_size;
        let run = train_ensemble(
            member_inits(&dims, self.seed, m_count)?,
            self.data(),
            &self.plan,
            &self.opt(),
            &self.stopping(StopMode::Joint),
            &shuffle_seeds(self.seed, m_count),
        )?;
        let (tx, ty) = self.test();
        let epochs = Some(run.normalized_epochs());
        let logits = run.member_logits(tx)?;
        let plain: Vec<ProbMatrix> = logits.iter().map(ProbMatrix::from_logits).collect();
        out.records.push(MetricsRecord::evaluate(&plain, None, ty, self.tags("joint_stop", "test"), epochs)?);
        let fit = calibrate_joint(&self.joint_sets(&run.members)?)?;
        let temp = fit.temperatures[0];
        let scaled: Vec<ProbMatrix> = logits.iter().map(|z| ProbMatrix::from_logits(&z.map(|v| v / temp))).collect();
        let combined = predict_joint(&logits, temp)?;
        out.records.push(MetricsRecord::evaluate(&scaled, Some(&combined), ty, self.tags("joint_stop+joint_ts", "test"), epochs)?);
        out.fits.push(NamedFit { variant: "joint_ts".into(), fit });
        out.stops.push(NamedStop { variant: "joint".into(), decisions: run.decisions });
        out.monitors.push((format!("monitor_{}_joint.csv", self.name()), run.log));
        Ok(out)
    }

    fn batch_ensemble(&self) -> Result<JobOutput> {
        let mut out = JobOutput::new();
        let dims = self.prep.dims(self.config);
        let m_count = self.config.ensemble_size;
        let (tx, ty) = self.test();
        let data = self.data();
        for &init in &self.config.batch_ensemble.inits {
            let variant = init.label();
            let model = be_model(&dims, m_count, init, self.config.batch_ensemble.batch_norm, self.seed)?;
            let run = be_train(
                model,
                data,
                &self.plan,
                &self.opt(),
                &self.stopping(StopMode::Joint),
                derive_seed(self.seed, 0, Purpose::Shuffle),
            )?;
            let epochs = Some(run.decision.normalized_epochs);
            let probs = run.model.member_probs(tx)?;
            out.records.push(MetricsRecord::evaluate(&probs, None, ty, self.tags(&variant, "test"), epochs)?);
            // Each member on its own training and validation rows: the
            // train/val gap exposes validation leakage through shared weights.
            for split in ["member_train", "member_val"] {
                let mut rows = Vec::with_capacity(m_count);
                for (m, s) in self.plan.members.iter().enumerate() {
                    let idx = if split == "member_train" { &s.train } else { &s.val };
                    let p = ProbMatrix::from_logits(&run.model.be_forward(&data.x.select_rows(idx), m)?);
                    rows.push(MetricsRecord::evaluate(&[p], None, &data.labels(idx), self.tags(&variant, split), epochs)?);
                }
                out.records.push(mean_record(&rows));
            }
            out.stops.push(NamedStop { variant: variant.clone(), decisions: vec![run.decision] });
            out.monitors.push((format!("monitor_{}_{variant}.csv", self.name()), run.log));
        }
        Ok(out)
    }
}

/// BatchEnsemble with slow weights from the seed's init stream and fast
/// weights from its own stream, so different fast-weight schemes share the
/// same slow initialization.
pub fn be_model(dims: &[usize], members: usize, init: FastInit, batch_norm: bool, seed: u64) -> Result<BatchEnsembleModel> {
    let slow = MlpParams::init(dims, &mut derive_rng(seed, 0, Purpose::Init))?;
    let fast = init_fast(dims, members, init, &mut derive_rng(seed, 0, Purpose::FastInit))?;
    BatchEnsembleModel::new(slow, fast, batch_norm)
}

/// Field-wise mean of rows that share their tags.
fn mean_record(rows: &[MetricsRecord]) -> MetricsRecord {
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricsRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
    MetricsRecord {
        error_pct: avg(|r| r.error_pct),
        nll: avg(|r| r.nll),
        ece: avg(|r| r.ece),
        diversity: avg(|r| r.diversity),
        entropy: avg(|r| r.entropy),
        ..rows[0].clone()
    }
}

fn rel(out_dir: &Path, path: &Path) -> String {
    path.strip_prefix(out_dir).unwrap_or(path).display().to_string()
}

/// Result of [`run_experiment`]: the manifest plus all seed-level rows.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub records: Vec<MetricsRecord>,
}

impl RunOutcome {
    pub fn complete(&self) -> bool {
        self.manifest.complete
    }
}

fn sweep(config: &ExperimentConfig, prep: &Prepared, out_dir: &Path) -> (Vec<MetricsRecord>, Vec<SweepEntry>) {
    let mut records = Vec::new();
    let mut entries = Vec::new();
    for &val_pct in &config.val_pcts {
        let result = (|| -> Result<(Vec<MetricsRecord>, SweepEntry)> {
            let grid = HyperGrid::new(config.sweep.weight_decays.clone(), config.ensemble_size, config.seeds.clone())?;
            let s = &config.sweep;
            let training = SweepTraining {
                dims: prep.dims(config),
                optimizer: OptimizerConfig::sgd(s.lr, s.momentum, 0.0),
                epochs: s.epochs,
                batch_size: s.batch_size,
            };
            let test = (&prep.test.x, prep.test.y.as_slice());
            let result = run_sweep(&grid, prep.train_data(), test, |seed| prep.plan(config, seed, Strategy::Shared, val_pct), &training, s.individual_objective)?;
            let mut cells_csv = Vec::new();
            write_cells_csv(&result.cells, &mut cells_csv)?;
            let cells_path = out_dir.join(format!("sweep_cells_v{}.csv", fmt_pct(val_pct)));
            write_atomic(&cells_path, &cells_csv)?;
            let summary_path = out_dir.join(format!("sweep_summary_v{}.json", fmt_pct(val_pct)));
            write_atomic(&summary_path, serde_json::to_string_pretty(&result.summary)?.as_bytes())?;
            let mut recs: Vec<MetricsRecord> = result.cells.iter().flat_map(|c| c.records.clone()).collect();
            for r in &mut recs {
                r.val_pct = 100.0 * val_pct;
            }
            let entry = SweepEntry {
                val_pct,
                summary: Some(result.summary),
                cells_csv: Some(rel(out_dir, &cells_path)),
                summary_json: Some(rel(out_dir, &summary_path)),
                diverged_cells: result.cells.iter().filter(|c| c.diverged.is_some()).count(),
                error: None,
            };
            Ok((recs, entry))
        })();
        match result {
            Ok((recs, entry)) => {
                records.extend(recs);
                entries.push(entry);
            }
            Err(e) => {
                log::error!("weight-decay sweep at val_pct {val_pct} failed: {e}");
                entries.push(SweepEntry {
                    val_pct,
                    summary: None,
                    cells_csv: None,
                    summary_json: None,
                    diverged_cells: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    (records, entries)
}

/// Runs every (seed, strategy, val_pct) combination of `config`, writing
/// metrics, report, plans, monitor logs and `manifest.json` under `out_dir`.
///
/// Failed runs are recorded in the manifest and leave `complete` false;
/// rows from successful runs are still written.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let start = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let prep = prepare(config)?;
    let workers = worker_count();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;

    let mut records = Vec::new();
    let mut runs = Vec::new();
    let mut sweeps = Vec::new();
    if config.experiment == ExperimentKind::WdSweep {
        let (recs, entries) = pool.install(|| sweep(config, &prep, out_dir));
        records = recs;
        sweeps = entries;
    } else {
        let mut keys = Vec::new();
        for &seed in &config.seeds {
            for &strategy in &config.strategies {
                for &val_pct in &config.val_pcts {
                    keys.push((seed, strategy, val_pct));
                }
            }
        }
        let outputs: Vec<(RunEntry, Result<JobOutput>)> = pool.install(|| {
            keys.par_iter()
                .map(|&(seed, strategy, val_pct)| {
                    let mut entry = RunEntry {
                        seed,
                        strategy,
                        val_pct,
                        plan: String::new(),
                        fits: Vec::new(),
                        stops: Vec::new(),
                        monitor_logs: Vec::new(),
                        skipped: Vec::new(),
                        error: None,
                    };
                    let result = (|| {
                        let plan = prep.plan(config, seed, strategy, val_pct)?;
                        let plan_path = out_dir.join("plans").join(format!("plan_s{seed}_{strategy}_v{}.json", fmt_pct(val_pct)));
                        write_atomic(&plan_path, plan.to_json()?.as_bytes())?;
                        entry.plan = rel(out_dir, &plan_path);
                        Job { config, prep: &prep, seed, strategy, val_pct, plan }.run()
                    })()
                    .map_err(|e| e.context(format!("seed {seed}, {strategy}, val_pct {val_pct}")));
                    (entry, result)
                })
                .collect()
        });
        for (mut entry, result) in outputs {
            match result {
                Ok(out) => {
                    for (name, rows) in &out.monitors {
                        let path = out_dir.join("monitor").join(name);
                        let mut buf = Vec::new();
                        write_monitor_csv(rows, &mut buf)?;
                        write_atomic(&path, &buf)?;
                        entry.monitor_logs.push(rel(out_dir, &path));
                    }
                    records.extend(out.records);
                    entry.fits = out.fits;
                    entry.stops = out.stops;
                    entry.skipped = out.skipped;
                }
                Err(e) => {
                    log::error!("{e}");
                    entry.error = Some(e.to_string());
                }
            }
            runs.push(entry);
        }
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut buf = Vec::new();
    write_records_csv(&records, &mut buf)?;
    write_atomic(&metrics_path, &buf)?;
    let report = write_report(&records, out_dir)?;
    let mut manifest = RunManifest {
        config: config.clone(),
        runs,
        sweeps,
        metrics_csv: rel(out_dir, &metrics_path),
        aggregate_csv: rel(out_dir, &report.aggregate),
        plot_files: report.plots.iter().map(|p| rel(out_dir, p)).collect(),
        workers,
        wall_clock_secs: 0.0,
        complete: false,
    };
    manifest.complete = manifest.failures() == 0;
    manifest.wall_clock_secs = start.elapsed().as_secs_f64();
    write_atomic(&out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(RunOutcome { manifest, records })
}

/// Reruns the configuration recorded in a manifest into `out_dir`.
pub fn rerun_from_manifest(manifest_path: &Path, out_dir: &Path) -> Result<RunOutcome> {
    let manifest = RunManifest::load(manifest_path)?;
    run_experiment(&manifest.config, out_dir)
}

/// Where a manifest's metrics CSV lives.
pub fn metrics_path(manifest_path: &Path, manifest: &RunManifest) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.metrics_csv)
}
