//! Experiment configuration: a TOML file plus `--dotted.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batchensemble::FastInit;
use crate::calibration::CalibrationMode;
use crate::data::{TaskSpec, TEST_FRACTION};
use crate::error::{Error, Result};
use crate::netcore::OptimizerConfig;
use crate::splits::Strategy;
use crate::training::{StopMode, DEFAULT_BATCH_SIZE, DEFAULT_PATIENCE};
use crate::tuning::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    WdSweep,
    TempScale,
    EarlyStop,
    BatchEnsemble,
    StopThenScale,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::WdSweep => "wd_sweep",
            ExperimentKind::TempScale => "temp_scale",
            ExperimentKind::EarlyStop => "early_stop",
            ExperimentKind::BatchEnsemble => "batch_ensemble",
            ExperimentKind::StopThenScale => "stop_then_scale",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Sgd,
    Adam,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: default_hidden() }
    }
}

/// Member training shared by the temperature, stopping and BatchEnsemble
/// experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fixed budget (cosine schedule) for runs without early stopping.
    pub epochs: usize,
    /// Cap for early-stopped runs.
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerChoice::Adam,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 50,
            max_epochs: 200,
            patience: DEFAULT_PATIENCE,
        }
    }
}

impl TrainConfig {
    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerChoice::Sgd => OptimizerConfig::sgd(self.lr, self.momentum, self.weight_decay),
            OptimizerChoice::Adam => OptimizerConfig::adam(self.lr, self.weight_decay),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub weight_decays: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Selection objective standing in for the single model.
    pub individual_objective: Objective,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            weight_decays: vec![0.0, 1e-5, 1e-4, 1e-3, 1e-2],
            epochs: 30,
            lr: 0.1,
            momentum: 0.9,
            batch_size: DEFAULT_BATCH_SIZE,
            individual_objective: Objective::Individual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub modes: Vec<CalibrationMode>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            modes: vec![CalibrationMode::None, CalibrationMode::Individual, CalibrationMode::Joint, CalibrationMode::Pool],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoppingSection {
    pub modes: Vec<StopMode>,
    /// Run joint stopping on disjoint plans with the mean-individual score.
    pub disjoint_fallback: bool,
}

impl Default for StoppingSection {
    fn default() -> Self {
        Self { modes: vec![StopMode::Individual, StopMode::Joint], disjoint_fallback: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchEnsembleConfig {
    pub inits: Vec<FastInit>,
    pub batch_norm: bool,
}

impl Default for BatchEnsembleConfig {
    fn default() -> Self {
        Self {
            inits: vec![
                FastInit::Gaussian { sigma: 0.1 },
                FastInit::Gaussian { sigma: 0.5 },
                FastInit::RandomSign,
            ],
            batch_norm: true,
        }
    }
}

fn default_ensemble_size() -> usize {
    4
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Shared]
}

fn default_val_pcts() -> Vec<f64> {
    vec![0.1]
}

fn default_test_fraction() -> f64 {
    TEST_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    /// Validation fractions in (0, 1).
    #[serde(default = "default_val_pcts")]
    pub val_pcts: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Fixes the generated data and the test split for all seeds.
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub stopping: StoppingSection,
    #[serde(default)]
    pub batch_ensemble: BatchEnsembleConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be >= 1".into()));
        }
        if self.strategies.is_empty() || self.val_pcts.is_empty() {
            return Err(Error::Config("strategies and val_pcts must not be empty".into()));
        }
        if let Some(p) = self.val_pcts.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("val_pct {p} outside (0, 1)")));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} outside (0, 1)", self.test_fraction)));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        self.train.optimizer_config().validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || t.max_epochs == 0 || t.patience == 0 {
            return Err(Error::Config("train batch_size, epochs, max_epochs and patience must be >= 1".into()));
        }
        match self.experiment {
            ExperimentKind::WdSweep => {
                crate::tuning::HyperGrid::new(self.sweep.weight_decays.clone(), self.ensemble_size, self.seeds.clone())?;
                if self.strategies != [Strategy::Shared] {
                    return Err(Error::Config("wd_sweep runs on the shared strategy only".into()));
                }
                if self.sweep.epochs == 0 || self.sweep.batch_size == 0 {
                    return Err(Error::Config("sweep epochs and batch_size must be >= 1".into()));
                }
            }
            ExperimentKind::TempScale if self.calibration.modes.is_empty() => {
                return Err(Error::Config("calibration.modes must not be empty".into()));
            }
            ExperimentKind::EarlyStop if self.stopping.modes.is_empty() => {
                return Err(Error::Config("stopping.modes must not be empty".into()));
            }
            ExperimentKind::BatchEnsemble => {
                if self.batch_ensemble.inits.is_empty() {
                    return Err(Error::Config("batch_ensemble.inits must not be empty".into()));
                }
                for init in &self.batch_ensemble.inits {
                    init.validate()?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// Builds a config from an optional file plus overrides, filling in
    /// `experiment` from `kind` when absent and rejecting a mismatch.
    pub fn resolve(path: Option<&Path>, overrides: &[String], kind: Option<ExperimentKind>) -> Result<Self> {
        let mut table = read_table(path, overrides)?;
        if let Some(kind) = kind {
            match table.get("experiment") {
                None => {
                    table.insert("experiment".into(), toml::Value::String(kind.as_str().into()));
                }
                Some(v) if v.as_str() == Some(kind.as_str()) => {}
                Some(v) => {
                    return Err(Error::Config(format!("config experiment {v} does not match subcommand {}", kind.as_str())));
                }
            }
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn read_table(path: Option<&Path>, overrides: &[String]) -> Result<toml::Table> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Ok(table)
}

/// Just the `task` and `data_seed` keys, for generating data without a full
/// experiment config.
pub fn resolve_task(path: Option<&Path>, overrides: &[String]) -> Result<(TaskSpec, u64)> {
    let mut table = read_table(path, overrides)?;
    let task: TaskSpec = table
        .remove("task")
        .ok_or_else(|| Error::Config("missing [task] section".into()))?
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    task.validate()?;
    let data_seed = match table.get("data_seed") {
        None => 0,
        Some(v) => v
            .as_integer()
            .and_then(|i| u64::try_from(i).ok())
            .ok_or_else(|| Error::Config(format!("data_seed {v} is not a non-negative integer")))?,
    };
    Ok((task, data_seed))
}

/// Applies `key.path=value` (leading dashes allowed). The value is read as a
/// TOML value when it parses as one and as a string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches('-');
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
experiment = "early_stop"
seeds = [1, 2]

[task]
kind = "blobs"
classes = 4
n = 400
noise = 1.0
"#;

    #[test]
    fn subcommand_kind_fills_or_conflicts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, BASE.replace("experiment = \"early_stop\"", "")).unwrap();
        let c = ExperimentConfig::resolve(Some(&path), &[], Some(ExperimentKind::TempScale)).unwrap();
        assert_eq!(c.experiment, ExperimentKind::TempScale);
        std::fs::write(&path, BASE).unwrap();
        assert!(ExperimentConfig::resolve(Some(&path), &[], Some(ExperimentKind::TempScale)).is_err());
        let (task, seed) = resolve_task(Some(&path), &["--data_seed=7".into()]).unwrap();
        assert_eq!(seed, 7);
        assert!(matches!(task, TaskSpec::Blobs { classes: 4, .. }));
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(c.experiment, ExperimentKind::EarlyStop);
        assert_eq!(c.ensemble_size, 4);
        assert_eq!(c.train.patience, 10);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.model.hidden, vec![32, 32]);
    }

    #[test]
    fn dotted_overrides() {
        let overrides = vec![
            "--train.patience=3".to_string(),
            "--task.noise=2.5".to_string(),
            "strategies=[\"shared\", \"overlapping\"]".to_string(),
            "--model.hidden=[8]".to_string(),
        ];
        let c = ExperimentConfig::from_toml_str(BASE, &overrides).unwrap();
        assert_eq!(c.train.patience, 3);
        assert_eq!(c.model.hidden, vec![8]);
        assert_eq!(c.strategies, vec![Strategy::Shared, Strategy::Overlapping]);
        assert!(matches!(c.task, TaskSpec::Blobs { noise, .. } if noise == 2.5));
        let c = ExperimentConfig::from_toml_str(BASE, &["--experiment=temp_scale".into()]).unwrap();
        assert_eq!(c.experiment, ExperimentKind::TempScale);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str(BASE, &["--experiment=grid_dance".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(BASE, &["--seeds=[]".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(BASE, &["--val_pcts=[1.5]".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(BASE, &["--train.paitence=3".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str(BASE, &["novalue".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap(), c);
    }
}
