//! The experiment pipeline: data, baseline pretraining, logging, feedback,
//! training and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_policy, save_estimator, save_policy, HashCheck};
use super::config::{
    ComparisonMetric, DataConfig, ExperimentConfig, LogSource, SystemSpec, TrainData, BASELINE,
};
use super::eval::{evaluate_model, EvalItem, EvalResult, Metric};
use super::report::{EstimatorSummary, LogSummary, RunReport, SeedResult, SystemReport};
use super::significance::{approx_randomization_test, SignificanceResult};
use crate::error::{invalid, Error, Result};
use crate::estimator::{
    evaluate_estimator, train_estimator, EstimatorEvalReport, Example, RewardEstimator, TrainingCurve,
};
use crate::feedback::{
    attach_queries, attach_sbleu_feedback, create_log, filter_log, perturb_log, random_sublog,
    simulate_queries, simulate_star_feedback, Domain, FeedbackLog, Pair, SyntheticTask,
};
use crate::objectives::{derive_seed, ObjectiveConfig, ObjectiveKind, TrainItem, Trainer};
use crate::optim::OptimizerKind;
use crate::policy::{Policy, TokenId};
use crate::rewards::Query;
use crate::stats::{mean, sample_std};

/// Splits of the synthetic task with simulated queries.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub pretrain: Vec<Pair>,
    pub log: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
    pub log_queries: Vec<Query>,
    pub test_queries: Vec<Query>,
}

/// Draws all splits. Data depend only on the task seed, so every run seed
/// sees the same sentences.
pub fn build_dataset(task: &SyntheticTask, data: &DataConfig) -> Result<Dataset> {
    let s = task.config().seed;
    let stop = task.stop_words();
    let refs = |pairs: &[Pair]| pairs.iter().map(|p| p.target.clone()).collect::<Vec<_>>();
    let log = task.corpus(Domain::InDomain, data.log, derive_seed(s, 101, 0));
    let test = task.corpus(Domain::InDomain, data.test, derive_seed(s, 103, 0));
    let (qmin, qmax) = (data.query_min_len, data.query_max_len);
    Ok(Dataset {
        pretrain: task.corpus(Domain::OutOfDomain, data.pretrain, derive_seed(s, 100, 0)),
        dev: task.corpus(Domain::InDomain, data.dev, derive_seed(s, 102, 0)),
        log_queries: simulate_queries(&refs(&log), &stop, derive_seed(s, 104, 0), qmin, qmax)?,
        test_queries: simulate_queries(&refs(&test), &stop, derive_seed(s, 105, 0), qmin, qmax)?,
        log,
        test,
    })
}

/// Owned token ids behind a [`TrainItem`].
#[derive(Clone, Debug, Default)]
pub struct OwnedItem {
    pub source: Vec<TokenId>,
    pub reference: Option<Vec<TokenId>>,
    pub logged: Option<Vec<TokenId>>,
    pub reward: Option<f64>,
    pub query: Option<Query>,
}

impl OwnedItem {
    pub fn view(&self) -> TrainItem<'_> {
        TrainItem {
            source: &self.source,
            reference: self.reference.as_deref(),
            logged: self.logged.as_deref(),
            reward: self.reward,
            query: self.query.as_ref(),
        }
    }
}

/// One epoch of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub objective: f64,
    pub dev_bleu: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; 0 means untrained.
    pub selected_epoch: usize,
}

/// When to stop and which epoch to keep.
#[derive(Clone, Copy, Debug)]
struct Schedule {
    epochs: usize,
    lr_decay: f64,
    patience: Option<usize>,
    select_on_dev: bool,
    /// Whether the starting point takes part in dev selection.
    keep_start: bool,
}

/// A fitted reward estimator with its held-out evaluation.
#[derive(Clone, Debug)]
pub struct FittedEstimator {
    pub estimator: RewardEstimator,
    pub eval: EstimatorEvalReport,
    pub curve: TrainingCurve,
}

/// Per-sentence test scores of one system under one seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentenceScores {
    pub bleu: Vec<f64>,
    pub recall: Vec<f64>,
}

pub struct Pipeline {
    config: ExperimentConfig,
    hash: String,
    task: SyntheticTask,
    data: Dataset,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let task = SyntheticTask::new(config.task.clone())?;
        let data = build_dataset(&task, &config.data)?;
        Ok(Pipeline {
            hash: config.hash(),
            config,
            task,
            data,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    fn src_ids(&self, tokens: &[String]) -> Vec<TokenId> {
        self.task.src_vocab().encode_tokens(tokens)
    }

    fn trg_ids(&self, tokens: &[String]) -> Vec<TokenId> {
        self.task.trg_vocab().encode_tokens(tokens)
    }

    fn eval_items(&self, pairs: &[Pair], queries: Option<&[Query]>) -> Vec<EvalItem> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, p)| EvalItem {
                source: self.src_ids(&p.source),
                reference: p.target.clone(),
                query: queries.map(|q| q[i].clone()),
            })
            .collect()
    }

    pub fn dev_items(&self) -> Vec<EvalItem> {
        self.eval_items(&self.data.dev, None)
    }

    pub fn test_items(&self) -> Vec<EvalItem> {
        self.eval_items(&self.data.test, Some(&self.data.test_queries))
    }

    pub fn log_sources(&self) -> Vec<Vec<TokenId>> {
        self.data.log.iter().map(|p| self.src_ids(&p.source)).collect()
    }

    pub fn log_references(&self) -> Vec<Vec<String>> {
        self.data.log.iter().map(|p| p.target.clone()).collect()
    }

    fn dev_bleu(&self, policy: &Policy) -> Result<f64> {
        let r = evaluate_model(policy, &self.dev_items(), &self.config.eval, &[Metric::CorpusBleu])?;
        Ok(r.bleu.expect("requested"))
    }

    /// Full test evaluation: corpus BLEU and query recall.
    pub fn evaluate(&self, policy: &Policy) -> Result<EvalResult> {
        let metrics = [
            Metric::CorpusBleu,
            Metric::QueryRecall {
                matcher: self.config.eval.matcher,
            },
        ];
        evaluate_model(policy, &self.test_items(), &self.config.eval, &metrics)
    }

    /// Trains `policy` in place on `items`, evaluating dev BLEU after every
    /// epoch. Ties in dev BLEU go to the earlier epoch.
    fn fit(
        &self,
        policy: &mut Policy,
        items: &[OwnedItem],
        objective: ObjectiveConfig,
        schedule: Schedule,
        mut estimator: Option<RewardEstimator>,
        label: &str,
    ) -> Result<Curve> {
        let mut curve = Curve::default();
        if schedule.epochs == 0 {
            return Ok(curve);
        }
        if items.is_empty() {
            return Err(invalid(format!("{label}: no training items")));
        }
        let batch_size = objective.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(objective.seed, 0x5eed, 0));
        let mut order: Vec<usize> = (0..items.len()).collect();
        let lr = objective.lr;
        let mut trainer = Trainer::new(objective, policy)?;
        // When fine-tuning, the starting point competes too, so training
        // never ends below it on dev.
        let mut best: Option<(f64, usize, Policy)> = if schedule.select_on_dev && schedule.keep_start {
            Some((self.dev_bleu(policy)?, 0, policy.clone()))
        } else {
            None
        };
        for epoch in 1..=schedule.epochs {
            trainer.set_lr(lr * schedule.lr_decay.powi(epoch as i32 - 1));
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(batch_size) {
                let batch: Vec<TrainItem<'_>> = chunk.iter().map(|&i| items[i].view()).collect();
                let stats = trainer
                    .step(policy, &batch, estimator.as_mut())
                    .map_err(|e| match e {
                        Error::NonFinite(what) => Error::NonFinite(format!(
                            "{what} ({label}, epoch {epoch}, step {})",
                            trainer.steps_taken()
                        )),
                        other => other,
                    })?;
                total += stats.objective;
                batches += 1;
            }
            let dev_bleu = self.dev_bleu(policy)?;
            curve.epochs.push(EpochRecord {
                epoch,
                objective: total / batches as f64,
                dev_bleu,
            });
            if !schedule.select_on_dev {
                curve.selected_epoch = epoch;
                continue;
            }
            let improved = best.as_ref().is_none_or(|b| dev_bleu > b.0);
            if improved {
                best = Some((dev_bleu, epoch, policy.clone()));
            } else if let (Some(p), Some(b)) = (schedule.patience, &best) {
                if epoch - b.1 >= p {
                    break;
                }
            }
        }
        if let Some((_, epoch, p)) = best {
            *policy = p;
            curve.selected_epoch = epoch;
        }
        Ok(curve)
    }

    /// Pretrains the baseline on out-of-domain data with early stopping on
    /// in-domain dev BLEU.
    pub fn pretrain(&self, seed: u64) -> Result<(Policy, Curve)> {
        let cfg = &self.config;
        let mut policy = Policy::new(
            cfg.policy.clone(),
            self.task.src_vocab().clone(),
            self.task.trg_vocab().clone(),
            derive_seed(seed, 1, 0),
        )?;
        let items: Vec<OwnedItem> = self
            .data
            .pretrain
            .iter()
            .map(|p| OwnedItem {
                source: self.src_ids(&p.source),
                reference: Some(self.trg_ids(&p.target)),
                ..Default::default()
            })
            .collect();
        let objective = ObjectiveConfig {
            kind: ObjectiveKind::Mle,
            optimizer: OptimizerKind::Adam,
            lr: cfg.pretrain.lr,
            batch_size: cfg.pretrain.batch_size,
            seed: derive_seed(seed, 2, 0),
            ..Default::default()
        };
        let schedule = Schedule {
            epochs: cfg.pretrain.epochs,
            lr_decay: cfg.pretrain.lr_decay,
            patience: cfg.pretrain.patience,
            select_on_dev: true,
            keep_start: false,
        };
        let curve = self.fit(&mut policy, &items, objective, schedule, None, BASELINE)?;
        Ok((policy, curve))
    }

    /// Baseline translations of the log sources, with simulated queries.
    pub fn base_log(&self, baseline: &Policy) -> Result<FeedbackLog> {
        let log = create_log(baseline, &self.log_sources(), self.config.logging, BASELINE)?;
        attach_queries(&log, &self.data.log_queries)
    }

    /// Builds every configured log, in configuration order.
    pub fn build_logs(&self, baseline: &Policy, seed: u64) -> Result<BTreeMap<String, FeedbackLog>> {
        let base = self.base_log(baseline)?;
        let refs = self.log_references();
        let mut logs: BTreeMap<String, FeedbackLog> = BTreeMap::new();
        for (i, spec) in self.config.logs.iter().enumerate() {
            let s = derive_seed(seed, 4, i as u64);
            let get = |n: &String| logs.get(n).ok_or_else(|| invalid(format!("unknown log {n}")));
            let log = match &spec.source {
                LogSource::Sbleu => attach_sbleu_feedback(&base, &refs)?,
                LogSource::Stars { noise } => simulate_star_feedback(&base, &refs, noise, s)?,
                LogSource::Perturb { from } => perturb_log(get(from)?, s)?,
                LogSource::Filter { from, predicate } => filter_log(get(from)?, *predicate)?,
                LogSource::RandomSublog { from, size_of } => {
                    random_sublog(get(from)?, get(size_of)?.len(), s)?
                }
            };
            logs.insert(spec.name.clone(), log);
        }
        Ok(logs)
    }

    fn log_items(&self, log: &FeedbackLog) -> Vec<OwnedItem> {
        log.entries()
            .iter()
            .map(|e| {
                let y = e.translation_ids(self.task.trg_vocab());
                OwnedItem {
                    source: e.source_ids(self.task.src_vocab()),
                    reference: Some(y.clone()),
                    logged: Some(y),
                    reward: e.reward,
                    query: e.query.clone(),
                }
            })
            .collect()
    }

    fn reference_items(&self) -> Vec<OwnedItem> {
        self.data
            .log
            .iter()
            .zip(&self.data.log_queries)
            .map(|(p, q)| OwnedItem {
                source: self.src_ids(&p.source),
                reference: Some(self.trg_ids(&p.target)),
                query: Some(q.clone()),
                ..Default::default()
            })
            .collect()
    }

    /// Fits a reward estimator on a seeded split of `log`.
    pub fn fit_estimator(&self, baseline: &Policy, log: &FeedbackLog, seed: u64) -> Result<FittedEstimator> {
        let spec = &self.config.estimator;
        let mut examples: Vec<Example> = log
            .entries()
            .iter()
            .map(|e| {
                Ok(Example {
                    source: e.source_ids(self.task.src_vocab()),
                    target: e.translation_ids(self.task.trg_vocab()),
                    reward: e.require_reward()?,
                })
            })
            .collect::<Result<_>>()?;
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, 0)));
        let n_held = ((examples.len() as f64 * spec.heldout_fraction).round() as usize).max(1);
        if n_held >= examples.len() {
            return Err(invalid("log too small to hold out estimator data"));
        }
        let train = examples.split_off(n_held);
        let heldout = examples;
        let mut est = RewardEstimator::new(
            spec.model.clone(),
            self.task.src_vocab().len(),
            self.task.trg_vocab().len(),
            derive_seed(seed, 6, 0),
        )?;
        if spec.model.embed_size == baseline.config().embed_size {
            est.init_embeddings_from(baseline)?;
        }
        let mut tcfg = spec.train.clone();
        tcfg.seed = derive_seed(seed, 7, 0);
        let curve = train_estimator(&mut est, &train, &heldout, &tcfg)?;
        let eval = evaluate_estimator(&est, &heldout)?;
        Ok(FittedEstimator {
            estimator: est,
            eval,
            curve,
        })
    }

    /// Fine-tunes a copy of the baseline as described by `spec`.
    pub fn train_system(
        &self,
        baseline: &Policy,
        spec: &SystemSpec,
        logs: &BTreeMap<String, FeedbackLog>,
        estimators: &BTreeMap<String, FittedEstimator>,
        seed: u64,
        index: usize,
    ) -> Result<(Policy, Curve)> {
        let items = match &spec.data {
            TrainData::References => self.reference_items(),
            TrainData::Log { log } => {
                self.log_items(logs.get(log).ok_or_else(|| invalid(format!("unknown log {log}")))?)
            }
        };
        let estimator = match &spec.estimator_log {
            Some(l) => Some(
                estimators
                    .get(l)
                    .ok_or_else(|| invalid(format!("no estimator for log {l}")))?
                    .estimator
                    .clone(),
            ),
            None => None,
        };
        let mut objective = spec.objective.clone();
        objective.seed = derive_seed(seed, 10, index as u64);
        let schedule = Schedule {
            epochs: spec.epochs,
            lr_decay: 1.0,
            patience: None,
            select_on_dev: spec.select_on_dev,
            keep_start: true,
        };
        let mut policy = baseline.clone();
        let curve = self.fit(&mut policy, &items, objective, schedule, estimator, &spec.name)?;
        Ok((policy, curve))
    }

    fn seed_dir(&self, seed: u64) -> Option<PathBuf> {
        self.config.out_dir.as_ref().map(|d| d.join(format!("seed{seed}")))
    }

    /// Loads the baseline for `seed` from the output directory when a
    /// matching checkpoint exists, and pretrains (and saves) it otherwise.
    pub fn baseline(&self, seed: u64) -> Result<(Policy, Curve)> {
        let hash = self.config.baseline_hash(seed);
        if let Some(dir) = self.seed_dir(seed) {
            let ckpt = dir.join("baseline.ckpt");
            let meta = dir.join("baseline.json");
            if ckpt.exists() && meta.exists() {
                if let Ok(p) = load_policy(&ckpt, HashCheck::Require(&hash)) {
                    let curve: Curve = serde_json::from_slice(&std::fs::read(&meta)?)?;
                    return Ok((p, curve));
                }
            }
        }
        let (p, curve) = self.pretrain(seed)?;
        if let Some(dir) = self.seed_dir(seed) {
            std::fs::create_dir_all(&dir)?;
            save_policy(&p, &hash, &dir.join("baseline.ckpt"))?;
            std::fs::write(dir.join("baseline.json"), serde_json::to_vec_pretty(&curve)?)?;
        }
        Ok((p, curve))
    }

    fn write_artifacts(
        &self,
        dir: &Path,
        logs: &BTreeMap<String, FeedbackLog>,
        estimators: &BTreeMap<String, FittedEstimator>,
    ) -> Result<()> {
        std::fs::create_dir_all(dir.join("logs"))?;
        for (name, log) in logs {
            log.save(&dir.join("logs").join(format!("{name}.jsonl")))?;
        }
        for (name, f) in estimators {
            save_estimator(
                &f.estimator,
                self.task.src_vocab().len(),
                self.task.trg_vocab().len(),
                &self.hash,
                &dir.join(format!("estimator-{name}.ckpt")),
            )?;
        }
        Ok(())
    }

    /// Runs every stage for every seed and assembles the report.
    pub fn run(&self) -> Result<RunReport> {
        let start = Instant::now();
        let cfg = &self.config;
        let mut names = vec![BASELINE.to_string()];
        names.extend(cfg.systems.iter().map(|s| s.name.clone()));
        let mut per_system: Vec<Vec<SeedResult>> = vec![Vec::new(); names.len()];
        let mut scores: Vec<Vec<SentenceScores>> = vec![Vec::new(); names.len()];
        let mut log_summaries = Vec::new();
        let mut estimator_summaries = Vec::new();

        for &seed in &cfg.seeds {
            let dir = self.seed_dir(seed);
            let (bl, bl_curve) = self.baseline(seed)?;
            let logs = self.build_logs(&bl, seed)?;
            for (name, log) in &logs {
                let rewards: Vec<f64> = log.entries().iter().filter_map(|e| e.reward).collect();
                log_summaries.push(LogSummary {
                    seed,
                    log: name.clone(),
                    size: log.len(),
                    mean_reward: (!rewards.is_empty()).then(|| mean(&rewards)),
                });
            }

            let mut wanted: Vec<&String> = cfg.estimator.logs.iter().collect();
            wanted.extend(cfg.systems.iter().filter_map(|s| s.estimator_log.as_ref()));
            let mut estimators = BTreeMap::new();
            for l in wanted {
                if estimators.contains_key(l) {
                    continue;
                }
                let f = self.fit_estimator(&bl, &logs[l], seed)?;
                estimator_summaries.push(EstimatorSummary {
                    seed,
                    log: l.clone(),
                    eval: f.eval.clone(),
                    best_epoch: f.curve.best_epoch,
                });
                estimators.insert(l.clone(), f);
            }
            if let Some(d) = &dir {
                self.write_artifacts(d, &logs, &estimators)?;
            }

            for (i, name) in names.iter().enumerate() {
                let (policy, curve) = if i == 0 {
                    (bl.clone(), bl_curve.clone())
                } else {
                    self.train_system(&bl, &cfg.systems[i - 1], &logs, &estimators, seed, i)?
                };
                let res = self.evaluate(&policy)?;
                if let Some(d) = &dir {
                    if i > 0 {
                        save_policy(&policy, &self.hash, &d.join(format!("{name}.ckpt")))?;
                    }
                }
                per_system[i].push(SeedResult {
                    seed,
                    bleu: res.bleu.expect("requested"),
                    recall: res.recall.expect("requested"),
                    curve,
                });
                scores[i].push(SentenceScores {
                    bleu: res.sentence_bleu,
                    recall: res.sentence_recall,
                });
            }
        }

        let systems: Vec<SystemReport> = names
            .iter()
            .zip(per_system)
            .map(|(name, seeds)| {
                let b: Vec<f64> = seeds.iter().map(|s| s.bleu).collect();
                let r: Vec<f64> = seeds.iter().map(|s| s.recall).collect();
                SystemReport {
                    name: name.clone(),
                    bleu_mean: mean(&b),
                    bleu_std: sample_std(&b),
                    recall_mean: mean(&r),
                    recall_std: sample_std(&r),
                    seeds,
                }
            })
            .collect();

        let mut significance = Vec::new();
        for (k, c) in cfg.comparisons.iter().enumerate() {
            let idx = |n: &String| names.iter().position(|m| m == n).expect("validated");
            let pooled = |i: usize| -> Vec<f64> {
                scores[i]
                    .iter()
                    .flat_map(|s| match c.metric {
                        ComparisonMetric::Bleu => s.bleu.clone(),
                        ComparisonMetric::Recall => s.recall.clone(),
                    })
                    .collect()
            };
            let (a, b) = (pooled(idx(&c.a)), pooled(idx(&c.b)));
            let p = approx_randomization_test(&a, &b, cfg.eval.rounds, derive_seed(cfg.seeds[0], 9, k as u64))?;
            significance.push(SignificanceResult {
                a: c.a.clone(),
                b: c.b.clone(),
                metric: format!("{:?}", c.metric).to_lowercase(),
                difference: mean(&a) - mean(&b),
                p_value: p,
            });
        }

        let report = RunReport {
            name: cfg.name.clone(),
            config_hash: self.hash.clone(),
            seeds: cfg.seeds.clone(),
            systems,
            significance,
            logs: log_summaries,
            estimators: estimator_summaries,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        if let Some(d) = &cfg.out_dir {
            std::fs::create_dir_all(d)?;
            std::fs::write(d.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
            std::fs::write(d.join("report.txt"), report.to_table())?;
            std::fs::write(d.join("config.toml"), cfg.to_toml()?)?;
            for (name, per_seed) in names.iter().zip(&scores) {
                for (seed, s) in cfg.seeds.iter().zip(per_seed) {
                    let p = d.join(format!("seed{seed}")).join(format!("{name}.scores.json"));
                    std::fs::write(p, serde_json::to_vec(s)?)?;
                }
            }
        }
        Ok(report)
    }
}

/// Runs a configured experiment end to end.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    Pipeline::new(config.clone())?.run()
}
