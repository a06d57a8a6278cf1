//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::eval::EvalSpec;
use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorTrainConfig};
use crate::feedback::{DecodeMode, Predicate, StarNoise, TaskConfig};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::policy::PolicyConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Out-of-domain pairs used to pretrain the baseline.
    pub pretrain: usize,
    /// In-domain sources translated by the logging policy.
    pub log: usize,
    pub dev: usize,
    pub test: usize,
    pub query_min_len: usize,
    pub query_max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pretrain: 10_000,
            log: 2_000,
            dev: 500,
            test: 500,
            query_min_len: 1,
            query_max_len: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    /// Stop after this many epochs without dev BLEU improvement.
    pub patience: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            lr_decay: 1.0,
            patience: Some(3),
        }
    }
}

/// Where a named log comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum LogSource {
    /// Baseline translations of the log sources rewarded with sentence BLEU.
    Sbleu,
    /// Baseline translations with simulated star ratings.
    Stars {
        #[serde(default)]
        noise: StarNoise,
    },
    /// Rewards of another log shuffled across entries.
    Perturb { from: String },
    Filter { from: String, predicate: Predicate },
    /// A uniform sublog of `from` with as many entries as `size_of`.
    RandomSublog { from: String, size_of: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSpec {
    pub name: String,
    #[serde(flatten)]
    pub source: LogSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrainData {
    /// Log sources paired with their human references.
    References,
    /// A named log; logged translations double as pseudo-references.
    Log { log: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub name: String,
    pub data: TrainData,
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    /// Log whose estimator supplies rewards for sampled translations (DC).
    #[serde(default)]
    pub estimator_log: Option<String>,
    /// Keep the epoch with the best dev BLEU instead of the last one.
    #[serde(default)]
    pub select_on_dev: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSpec {
    pub model: EstimatorConfig,
    pub train: EstimatorTrainConfig,
    /// Fraction of each log held out for early stopping and evaluation.
    pub heldout_fraction: f64,
    /// Logs to fit an estimator on even when no system needs it.
    pub logs: Vec<String>,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec {
            model: EstimatorConfig::default(),
            train: EstimatorTrainConfig::default(),
            heldout_fraction: 0.1,
            logs: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparisonMetric {
    Bleu,
    Recall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSpec {
    pub a: String,
    pub b: String,
    pub metric: ComparisonMetric,
}

/// Name under which the pretrained baseline appears in reports.
pub const BASELINE: &str = "BL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub task: TaskConfig,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub pretrain: PretrainConfig,
    pub logging: DecodeMode,
    pub logs: Vec<LogSpec>,
    pub estimator: EstimatorSpec,
    pub systems: Vec<SystemSpec>,
    pub comparisons: Vec<ComparisonSpec>,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seeds: vec![1, 2, 3],
            out_dir: None,
            task: TaskConfig::default(),
            data: DataConfig::default(),
            policy: PolicyConfig::default(),
            pretrain: PretrainConfig::default(),
            logging: DecodeMode::Greedy,
            logs: Vec::new(),
            estimator: EstimatorSpec::default(),
            systems: Vec::new(),
            comparisons: Vec::new(),
            eval: EvalSpec::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form. The output directory is excluded
    /// so that moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// Hash of everything that determines the pretrained baseline for `seed`.
    pub fn baseline_hash(&self, seed: u64) -> String {
        let key = (&self.task, &self.data, &self.policy, &self.pretrain, &self.eval, seed);
        sha256_hex(&serde_json::to_vec(&key).expect("config serializes"))
    }

    pub fn log_spec(&self, name: &str) -> Option<&LogSpec> {
        self.logs.iter().find(|l| l.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.data.pretrain == 0 || self.data.dev == 0 || self.data.test == 0 || self.data.log == 0 {
            return fail("dataset sizes must be positive".into());
        }
        if !(self.pretrain.lr_decay > 0.0 && self.pretrain.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.estimator.heldout_fraction) {
            return fail("heldout_fraction must lie in [0, 1)".into());
        }
        let mut names: Vec<&str> = Vec::new();
        for l in &self.logs {
            if names.contains(&l.name.as_str()) {
                return fail(format!("duplicate log name {}", l.name));
            }
            let deps: Vec<&String> = match &l.source {
                LogSource::Sbleu | LogSource::Stars { .. } => vec![],
                LogSource::Perturb { from } | LogSource::Filter { from, .. } => vec![from],
                LogSource::RandomSublog { from, size_of } => vec![from, size_of],
            };
            for d in deps {
                if !names.contains(&d.as_str()) {
                    return fail(format!("log {} refers to {d}, which is not defined before it", l.name));
                }
            }
            names.push(&l.name);
        }
        for e in &self.estimator.logs {
            if !names.contains(&e.as_str()) {
                return fail(format!("estimator log {e} is not defined"));
            }
        }
        let mut systems: Vec<&str> = vec![BASELINE];
        for s in &self.systems {
            if systems.contains(&s.name.as_str()) {
                return fail(format!("duplicate system name {}", s.name));
            }
            s.objective.validate()?;
            if let TrainData::Log { log } = &s.data {
                if !names.contains(&log.as_str()) {
                    return fail(format!("system {} uses undefined log {log}", s.name));
                }
            }
            let needs_est = s.objective.kind == ObjectiveKind::Dc;
            match (&s.estimator_log, needs_est) {
                (Some(l), _) if !names.contains(&l.as_str()) => {
                    return fail(format!("system {} uses undefined estimator log {l}", s.name))
                }
                (None, true) => return fail(format!("system {} needs an estimator_log", s.name)),
                _ => {}
            }
            systems.push(&s.name);
        }
        for c in &self.comparisons {
            for n in [&c.a, &c.b] {
                if !systems.contains(&n.as_str()) {
                    return fail(format!("comparison refers to unknown system {n}"));
                }
            }
        }
        Ok(())
    }
}
