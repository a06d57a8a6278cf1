//! Held-out evaluation of reward predictions.

use serde::{Deserialize, Serialize};

use super::model::RewardEstimator;
use super::train::Example;
use crate::error::{Error, Result};
use crate::stats::{mean, pearson, spearman};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorEvalReport {
    pub mse: f64,
    /// `|mean(predictions) - mean(labels)|`
    pub macro_distance: f64,
    /// `mean |prediction - label|`
    pub micro_distance: f64,
    pub pearson: f64,
    pub spearman: f64,
    /// Set when predictions or labels have zero variance; correlations are
    /// then reported as 0.
    pub degenerate: bool,
}

pub fn report(predictions: &[f64], labels: &[f64]) -> Result<EstimatorEvalReport> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = predictions.len() as f64;
    let mse = predictions.iter().zip(labels).map(|(p, l)| (p - l) * (p - l)).sum::<f64>() / n;
    let micro = predictions.iter().zip(labels).map(|(p, l)| (p - l).abs()).sum::<f64>() / n;
    let r = pearson(predictions, labels);
    let rho = spearman(predictions, labels);
    Ok(EstimatorEvalReport {
        mse,
        macro_distance: (mean(predictions) - mean(labels)).abs(),
        micro_distance: micro,
        pearson: r.unwrap_or(0.0),
        spearman: rho.unwrap_or(0.0),
        degenerate: r.is_none() || rho.is_none(),
    })
}

pub fn evaluate_estimator(est: &RewardEstimator, heldout: &[Example]) -> Result<EstimatorEvalReport> {
    let predictions = heldout
        .iter()
        .map(|e| est.predict(&e.source, &e.target))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = heldout.iter().map(|e| e.reward).collect();
    report(&predictions, &labels)
}
