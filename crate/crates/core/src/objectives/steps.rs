//! One-batch update steps and the training driver that dispatches on the
//! configured objective.

use diffcore::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::baseline::BaselineState;
use super::config::{ObjectiveConfig, ObjectiveKind, SampleReward};
use super::losses::{
    dc_objective, dpm_objective, el_surrogate, mix_objective, mle_objective, mrt_objective,
    wmrt_objective,
};
use super::samples::{derive_seed, draw_samples, Sample, SamplePlan, TrainItem};
use crate::error::{invalid, Error, Result};
use crate::estimator::{batch_gradient, Example, RewardEstimator};
use crate::optim::Optimizer;
use crate::policy::{Dropout, Policy, PAD};

/// Objective value and parameter gradient of `build` at the current policy.
pub fn gradient_of<F>(policy: &Policy, build: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph<'_>, &Policy) -> Result<Var>,
{
    let mut g = Graph::new(policy.params());
    let v = build(&mut g, policy)?;
    let value = g.scalar(v);
    if !value.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok((value, g.backward(v)?.into_params()))
}

fn ascend_with<F>(policy: &mut Policy, opt: &mut Optimizer, build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph<'_>, &Policy) -> Result<Var>,
{
    let (value, grads) = gradient_of(policy, build)?;
    opt.ascend(policy.params_mut(), &grads)?;
    Ok(value)
}

/// Ascent step on the reference log-likelihood.
pub fn mle_step(policy: &mut Policy, items: &[TrainItem<'_>], opt: &mut Optimizer) -> Result<f64> {
    ascend_with(policy, opt, |g, p| mle_objective(g, p, items))
}

pub fn mrt_step(
    policy: &mut Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    alpha: f64,
    opt: &mut Optimizer,
) -> Result<f64> {
    ascend_with(policy, opt, |g, p| mrt_objective(g, p, items, samples, alpha))
}

pub fn wmrt_step(
    policy: &mut Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    alpha: f64,
    floor: f64,
    opt: &mut Optimizer,
) -> Result<f64> {
    ascend_with(policy, opt, |g, p| wmrt_objective(g, p, items, samples, alpha, floor))
}

/// `λ · MLE + (W-)MRT`; word-level when `word_floor` is given.
pub fn mix_step(
    policy: &mut Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    lambda: f64,
    alpha: f64,
    word_floor: Option<f64>,
    opt: &mut Optimizer,
) -> Result<f64> {
    ascend_with(policy, opt, |g, p| {
        let mle = mle_objective(g, p, items)?;
        let risk = match word_floor {
            Some(floor) => wmrt_objective(g, p, items, samples, alpha, floor)?,
            None => mrt_objective(g, p, items, samples, alpha)?,
        };
        mix_objective(g, mle, risk, lambda)
    })
}

pub fn el_step(
    policy: &mut Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    opt: &mut Optimizer,
) -> Result<f64> {
    ascend_with(policy, opt, |g, p| el_surrogate(g, p, items, samples))
}

fn logged_rewards(items: &[TrainItem<'_>]) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|i| i.reward.ok_or_else(|| invalid("log entry without a reward")))
        .collect()
}

/// DPM step; the logged-reward baseline is folded in after the update.
pub fn dpm_step(
    policy: &mut Policy,
    items: &[TrainItem<'_>],
    baselines: &mut BaselineState,
    normalize: bool,
    opt: &mut Optimizer,
) -> Result<f64> {
    let rewards = logged_rewards(items)?;
    let b = baselines.logged_mean;
    let value = ascend_with(policy, opt, |g, p| dpm_objective(g, p, items, b, normalize))?;
    rewards.iter().for_each(|&r| baselines.update_logged(r));
    Ok(value)
}

/// DC step with estimated rewards already attached to `samples`. Both
/// baselines are updated afterwards; the estimated one receives the mean
/// sample reward of each item that has samples.
pub fn dc_step(
    policy: &mut Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    baselines: &mut BaselineState,
    normalize: bool,
    opt: &mut Optimizer,
) -> Result<f64> {
    let rewards = logged_rewards(items)?;
    let b = (baselines.logged_mean, baselines.estimated_mean);
    let value = ascend_with(policy, opt, |g, p| dc_objective(g, p, items, samples, b, normalize))?;
    rewards.iter().for_each(|&r| baselines.update_logged(r));
    for set in samples.iter().filter(|s| !s.is_empty()) {
        let m = set.iter().map(|s| s.reward).sum::<f64>() / set.len() as f64;
        baselines.update_estimated(m);
    }
    Ok(value)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Value of the maximized objective (the surrogate for EL).
    pub objective: f64,
    /// Mean reward of the samples drawn this step, if any.
    pub sample_reward: Option<f64>,
}

/// Owns the optimizer, baselines and step counter of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: ObjectiveConfig,
    optimizer: Optimizer,
    estimator_optimizer: Optimizer,
    baselines: BaselineState,
    steps: u64,
}

impl Trainer {
    pub fn new(config: ObjectiveConfig, policy: &Policy) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, config.lr)
            .freeze_row(policy.src_embed_id().0, PAD)
            .freeze_row(policy.trg_embed_id().0, PAD);
        let estimator_optimizer = Optimizer::sgd(config.lr * config.estimator_loss_weight);
        Ok(Trainer {
            config,
            optimizer,
            estimator_optimizer,
            baselines: BaselineState::default(),
            steps: 0,
        })
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.config
    }

    pub fn baselines(&self) -> &BaselineState {
        &self.baselines
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Scales the policy learning rate, e.g. for per-epoch decay.
    pub fn set_lr(&mut self, lr: f64) {
        self.optimizer.set_lr(lr);
    }

    fn sample_plan(&self) -> SamplePlan {
        let kind = self.config.kind;
        SamplePlan {
            k: self.config.k,
            reward: match kind {
                ObjectiveKind::Dc => SampleReward::Estimated,
                _ => self.config.sample_reward,
            },
            // Monte-Carlo estimates keep repeats; sample-set objectives use sets.
            distinct: kind != ObjectiveKind::El,
            word_level: kind.word_level(),
        }
    }

    /// Draws the frozen sample sets for this step (empty sets when the
    /// objective does not sample).
    pub fn draw(
        &self,
        policy: &Policy,
        items: &[TrainItem<'_>],
        estimator: Option<&RewardEstimator>,
    ) -> Result<Vec<Vec<Sample>>> {
        if !self.config.kind.uses_samples() || self.config.k == 0 {
            return Ok(vec![Vec::new(); items.len()]);
        }
        let plan = self.sample_plan();
        items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let seed = derive_seed(self.config.seed, self.steps, i as u64);
                draw_samples(policy, item, &plan, seed, estimator)
            })
            .collect()
    }

    /// One update on `items` with the configured objective.
    pub fn step(
        &mut self,
        policy: &mut Policy,
        items: &[TrainItem<'_>],
        estimator: Option<&mut RewardEstimator>,
    ) -> Result<StepStats> {
        if items.is_empty() {
            return Err(invalid("empty batch"));
        }
        let samples = self.draw(policy, items, estimator.as_deref())?;
        let c = &self.config;
        let opt = &mut self.optimizer;
        let objective = match c.kind {
            ObjectiveKind::Mle => mle_step(policy, items, opt)?,
            ObjectiveKind::Mrt => mrt_step(policy, items, &samples, c.alpha, opt)?,
            ObjectiveKind::WMrt => wmrt_step(policy, items, &samples, c.alpha, c.reward_floor, opt)?,
            ObjectiveKind::Mix => mix_step(policy, items, &samples, c.lambda, c.alpha, None, opt)?,
            ObjectiveKind::WMix => {
                mix_step(policy, items, &samples, c.lambda, c.alpha, Some(c.reward_floor), opt)?
            }
            ObjectiveKind::El => el_step(policy, items, &samples, opt)?,
            ObjectiveKind::Dpm => dpm_step(policy, items, &mut self.baselines, c.length_normalize, opt)?,
            ObjectiveKind::Dc => {
                let v = dc_step(policy, items, &samples, &mut self.baselines, c.length_normalize, opt)?;
                if c.estimator_loss_weight > 0.0 {
                    let est = estimator.ok_or_else(|| invalid("DC needs a reward estimator"))?;
                    finetune_estimator(est, items, &mut self.estimator_optimizer)?;
                }
                v
            }
        };
        let all: Vec<f64> = samples.iter().flatten().map(|s| s.reward).collect();
        self.steps += 1;
        Ok(StepStats {
            objective,
            sample_reward: (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64),
        })
    }
}

/// One weighted-MSE descent step of the estimator on the logged batch.
fn finetune_estimator(
    est: &mut RewardEstimator,
    items: &[TrainItem<'_>],
    opt: &mut Optimizer,
) -> Result<()> {
    let examples = items
        .iter()
        .map(|i| {
            Ok(Example {
                source: i.source.to_vec(),
                target: i.logged.ok_or_else(|| invalid("log entry without a translation"))?.to_vec(),
                reward: i.reward.ok_or_else(|| invalid("log entry without a reward"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Example> = examples.iter().collect();
    let (_, grads) = batch_gradient(est, &refs, true, &mut Dropout::new(0.0, 0))?;
    opt.descend(est.params_mut(), &grads)
}
