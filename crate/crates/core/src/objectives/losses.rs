//! Differentiable objective values. Every builder returns a scalar to be
//! maximized, averaged over the batch; sample sets are constants.

use diffcore::{Graph, Tensor, Var};

use super::samples::{with_eos, Sample, TrainItem};
use crate::error::{invalid, Error, Result};
use crate::policy::Policy;

/// `p^α / Σ p'^α` over a sample set, from log-probabilities.
pub fn renormalize_q(log_probs: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if log_probs.is_empty() {
        return Err(Error::EmptySequence);
    }
    if !(alpha > 0.0) || log_probs.iter().any(|l| !l.is_finite()) {
        return Err(invalid("renormalize_q needs alpha > 0 and finite log-probabilities"));
    }
    let scaled: Vec<f64> = log_probs.iter().map(|l| alpha * l).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.iter().map(|x| x / z).collect())
}

fn batch_mean(g: &mut Graph<'_>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(invalid("empty batch"));
    }
    let w = vec![1.0 / terms.len() as f64; terms.len()];
    Ok(g.weighted_sum(terms, &w)?)
}

fn row_constant(g: &mut Graph<'_>, values: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::row(values))?)
}

/// Mean of `Σ_j c_j · v_j` where `vs` are scalar nodes.
fn dot_constant(g: &mut Graph<'_>, vs: &[Var], c: &[f64]) -> Result<Var> {
    let row = g.concat(vs, 1)?;
    let c = row_constant(g, c)?;
    let prod = g.mul(row, c)?;
    Ok(g.sum(prod)?)
}

fn check_samples(items: &[TrainItem<'_>], samples: &[Vec<Sample>]) -> Result<()> {
    if items.len() != samples.len() {
        return Err(Error::LengthMismatch {
            left: items.len(),
            right: samples.len(),
        });
    }
    Ok(())
}

/// Log-probabilities of every sample of one item, sharing the encoder.
fn sample_log_probs(
    g: &mut Graph<'_>,
    policy: &Policy,
    item: &TrainItem<'_>,
    samples: &[Sample],
) -> Result<Vec<Var>> {
    let enc = policy.encode(g, item.source, None)?;
    samples
        .iter()
        .map(|s| Ok(policy.score_encoded(g, &enc, &s.tokens, None)?.total))
        .collect()
}

/// `(1/B) Σ log p(y|x)` over references.
pub fn mle_objective(g: &mut Graph<'_>, policy: &Policy, items: &[TrainItem<'_>]) -> Result<Var> {
    let mut terms = Vec::with_capacity(items.len());
    for item in items {
        let y = item.reference.ok_or_else(|| invalid("MLE needs a reference"))?;
        terms.push(policy.score(g, item.source, &with_eos(y), None)?.total);
    }
    batch_mean(g, &terms)
}

/// `(1/B) Σ_s Σ_ỹ q^α(ỹ|x) · r(ỹ)` with the given per-sample reward values.
fn renormalized_risk(
    g: &mut Graph<'_>,
    policy: &Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    alpha: f64,
    reward: impl Fn(&Sample) -> f64,
) -> Result<Var> {
    check_samples(items, samples)?;
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    let mut terms = Vec::with_capacity(items.len());
    for (item, set) in items.iter().zip(samples) {
        if set.is_empty() {
            return Err(Error::EmptySequence);
        }
        let lps = sample_log_probs(g, policy, item, set)?;
        let row = g.concat(&lps, 1)?;
        let scaled = g.scale(row, alpha)?;
        let q = g.softmax(scaled)?;
        let r: Vec<f64> = set.iter().map(&reward).collect();
        let r = row_constant(g, &r)?;
        let qr = g.mul(q, r)?;
        terms.push(g.sum(qr)?);
    }
    batch_mean(g, &terms)
}

/// Sequence-level minimum risk objective.
pub fn mrt_objective(
    g: &mut Graph<'_>,
    policy: &Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    alpha: f64,
) -> Result<Var> {
    renormalized_risk(g, policy, items, samples, alpha, |s| s.reward)
}

/// Product of word rewards, each floored at `floor`.
pub fn word_reward_product(sample: &Sample, floor: f64) -> f64 {
    sample.token_rewards.iter().map(|r| r.max(floor)).product()
}

/// Word-level minimum risk objective: each sample's renormalized
/// probability is weighted by the product of its word rewards.
pub fn wmrt_objective(
    g: &mut Graph<'_>,
    policy: &Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    alpha: f64,
    floor: f64,
) -> Result<Var> {
    if samples.iter().flatten().any(|s| s.token_rewards.len() != s.tokens.len()) {
        return Err(invalid("word-level objective needs word rewards for every sample"));
    }
    renormalized_risk(g, policy, items, samples, alpha, |s| word_reward_product(s, floor))
}

/// `λ · MLE + risk`.
pub fn mix_objective(g: &mut Graph<'_>, mle: Var, risk: Var, lambda: f64) -> Result<Var> {
    let scaled = g.scale(mle, lambda)?;
    Ok(g.add(scaled, risk)?)
}

/// Surrogate `(1/B) Σ_s (1/k) Σ_ỹ Δ(ỹ) log p(ỹ|x)` whose gradient is the
/// score-function estimate of the expected-reward gradient.
pub fn el_surrogate(
    g: &mut Graph<'_>,
    policy: &Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
) -> Result<Var> {
    check_samples(items, samples)?;
    let mut terms = Vec::with_capacity(items.len());
    for (item, set) in items.iter().zip(samples) {
        if set.is_empty() {
            return Err(Error::EmptySequence);
        }
        let lps = sample_log_probs(g, policy, item, set)?;
        let w: Vec<f64> = set.iter().map(|s| s.reward / set.len() as f64).collect();
        terms.push(dot_constant(g, &lps, &w)?);
    }
    batch_mean(g, &terms)
}

/// Log-probability of the logged translation, divided by its length when
/// `normalize` is set.
fn logged_score(
    g: &mut Graph<'_>,
    policy: &Policy,
    item: &TrainItem<'_>,
    normalize: bool,
) -> Result<Var> {
    let y = item.logged.ok_or_else(|| invalid("log entry without a translation"))?;
    let y = with_eos(y);
    let total = policy.score(g, item.source, &y, None)?.total;
    if normalize {
        Ok(g.scale(total, 1.0 / y.len() as f64)?)
    } else {
        Ok(total)
    }
}

/// Self-normalized logged term `(1/B) Σ_h (Δ_h − baseline) · p̄(y_h|x_h)`,
/// where `p̄` renormalizes (length-normalized) probabilities over the batch.
pub fn dpm_objective(
    g: &mut Graph<'_>,
    policy: &Policy,
    items: &[TrainItem<'_>],
    baseline: f64,
    normalize: bool,
) -> Result<Var> {
    if items.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut scores = Vec::with_capacity(items.len());
    let mut centered = Vec::with_capacity(items.len());
    for item in items {
        scores.push(logged_score(g, policy, item, normalize)?);
        let r = item.reward.ok_or_else(|| invalid("log entry without a reward"))?;
        centered.push((r - baseline) / items.len() as f64);
    }
    let row = g.concat(&scores, 1)?;
    let p_bar = g.softmax(row)?;
    let c = row_constant(g, &centered)?;
    let prod = g.mul(p_bar, c)?;
    Ok(g.sum(prod)?)
}

/// Doubly controlled objective: the DPM term plus
/// `(1/B) Σ_h Σ_{y∈S} (Δ̂(y) − est_baseline) · p(y|x_h)`, with `p`
/// length-normalized when `normalize` is set. Sample rewards hold Δ̂.
pub fn dc_objective(
    g: &mut Graph<'_>,
    policy: &Policy,
    items: &[TrainItem<'_>],
    samples: &[Vec<Sample>],
    baselines: (f64, f64),
    normalize: bool,
) -> Result<Var> {
    check_samples(items, samples)?;
    let logged = dpm_objective(g, policy, items, baselines.0, normalize)?;
    let mut terms = vec![logged];
    let b = items.len() as f64;
    for (item, set) in items.iter().zip(samples) {
        if set.is_empty() {
            continue;
        }
        let lps = sample_log_probs(g, policy, item, set)?;
        let mut probs = Vec::with_capacity(set.len());
        for (lp, s) in lps.into_iter().zip(set) {
            let lp = if normalize {
                g.scale(lp, 1.0 / s.tokens.len() as f64)?
            } else {
                lp
            };
            probs.push(g.exp(lp)?);
        }
        let w: Vec<f64> = set.iter().map(|s| (s.reward - baselines.1) / b).collect();
        terms.push(dot_constant(g, &probs, &w)?);
    }
    let ones = vec![1.0; terms.len()];
    Ok(g.weighted_sum(&terms, &ones)?)
}
