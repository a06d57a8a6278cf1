//! Weighted mean-squared-error training with held-out early stopping.

use diffcore::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::RewardEstimator;
use crate::error::{invalid, Error, Result};
use crate::optim::Optimizer;
use crate::policy::{Dropout, TokenId, PAD};

/// A (source, translation, reward) training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without held-out improvement.
    pub patience: Option<usize>,
    /// Weight each item by the inverse frequency of its reward bucket.
    pub bucket_weighting: bool,
    pub seed: u64,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        EstimatorTrainConfig {
            lr: 1e-3,
            epochs: 20,
            batch_size: 32,
            patience: Some(5),
            bucket_weighting: true,
            seed: 0,
        }
    }
}

/// Per-epoch losses and the epoch whose parameters were kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub train_loss: Vec<f64>,
    pub heldout_mse: Vec<f64>,
    /// 0-based index into `heldout_mse`.
    pub best_epoch: usize,
}

pub const NUM_BUCKETS: usize = 10;

pub fn bucket(reward: f64) -> usize {
    ((reward * NUM_BUCKETS as f64).floor() as usize).min(NUM_BUCKETS - 1)
}

/// Inverse bucket-frequency weights for one batch. With a single occupied
/// bucket every weight is 1.
pub fn bucket_weights(rewards: &[f64]) -> Vec<f64> {
    let mut counts = [0usize; NUM_BUCKETS];
    for &r in rewards {
        counts[bucket(r)] += 1;
    }
    rewards.iter().map(|&r| 1.0 / counts[bucket(r)] as f64).collect()
}

fn check_examples(examples: &[Example], what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(invalid(format!("{what} set is empty")));
    }
    if let Some(e) = examples.iter().find(|e| !(0.0..=1.0).contains(&e.reward)) {
        return Err(invalid(format!("reward {} outside [0, 1]", e.reward)));
    }
    Ok(())
}

/// Unweighted mean squared error of predictions on `examples`.
pub fn mse(est: &RewardEstimator, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for e in examples {
        let d = est.predict(&e.source, &e.target)? - e.reward;
        total += d * d;
    }
    Ok(total / examples.len() as f64)
}

/// Trains in place and restores the parameters of the best held-out epoch
/// (the earliest one on ties).
pub fn train_estimator(
    est: &mut RewardEstimator,
    train: &[Example],
    heldout: &[Example],
    config: &EstimatorTrainConfig,
) -> Result<TrainingCurve> {
    check_examples(train, "training")?;
    check_examples(heldout, "held-out")?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout = Dropout::new(est.config().dropout, config.seed ^ 0x5eed);
    let mut opt = Optimizer::adam(config.lr)
        .freeze_row(est.src_embed_id().0, PAD)
        .freeze_row(est.trg_embed_id().0, PAD);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = TrainingCurve {
        train_loss: Vec::new(),
        heldout_mse: Vec::new(),
        best_epoch: 0,
    };
    let mut best = (f64::INFINITY, est.params().clone());
    let mut since_best = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradient(est, &batch, config.bucket_weighting, &mut dropout)?;
            epoch_loss += loss * batch.len() as f64;
            opt.descend(est.params_mut(), &grads)?;
        }
        curve.train_loss.push(epoch_loss / train.len() as f64);
        let h = mse(est, heldout)?;
        curve.heldout_mse.push(h);
        if h < best.0 {
            best = (h, est.params().clone());
            curve.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    *est.params_mut() = best.1;
    Ok(curve)
}

/// Weighted MSE `Σ w (pred - r)^2 / Σ w` of one batch and its gradient.
pub fn batch_gradient(
    est: &RewardEstimator,
    batch: &[&Example],
    bucket_weighting: bool,
    dropout: &mut Dropout,
) -> Result<(f64, Vec<Tensor>)> {
    let rewards: Vec<f64> = batch.iter().map(|e| e.reward).collect();
    let mut weights = if bucket_weighting {
        bucket_weights(&rewards)
    } else {
        vec![1.0; batch.len()]
    };
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);

    let mut g = Graph::new(est.params());
    let mut errs = Vec::with_capacity(batch.len());
    for e in batch {
        let p = est.forward(&mut g, &e.source, &e.target, Some(&mut *dropout))?;
        let target = g.constant(Tensor::scalar(e.reward))?;
        let d = g.sub(p, target)?;
        errs.push(g.mul(d, d)?);
    }
    let loss = g.weighted_sum(&errs, &weights)?;
    let value = g.scalar(loss);
    Ok((value, g.backward(loss)?.into_params()))
}
