use serde::{Deserialize, Serialize};

use super::config::SampleReward;
use crate::error::{invalid, Result};
use crate::estimator::RewardEstimator;
use crate::policy::{Policy, TokenId, EOS};
use crate::rewards::{Query, RewardSpec};

/// One training instance. Token sequences are given without the trailing
/// end-of-sequence marker.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainItem<'a> {
    pub source: &'a [TokenId],
    /// Reference or pseudo-reference translation.
    pub reference: Option<&'a [TokenId]>,
    /// Translation shown by the logging system.
    pub logged: Option<&'a [TokenId]>,
    /// Reward logged for `logged`.
    pub reward: Option<f64>,
    pub query: Option<&'a Query>,
}

impl<'a> TrainItem<'a> {
    pub fn supervised(source: &'a [TokenId], reference: &'a [TokenId]) -> Self {
        TrainItem {
            source,
            reference: Some(reference),
            ..Default::default()
        }
    }

    pub fn logged(source: &'a [TokenId], translation: &'a [TokenId], reward: f64) -> Self {
        TrainItem {
            source,
            logged: Some(translation),
            reward: Some(reward),
            ..Default::default()
        }
    }
}

/// A sampled translation with its (frozen) reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<TokenId>,
    pub reward: f64,
    /// Word-level rewards aligned with `tokens`; empty unless requested.
    pub token_rewards: Vec<f64>,
}

pub(crate) fn with_eos(tokens: &[TokenId]) -> Vec<TokenId> {
    let mut v = tokens.to_vec();
    v.push(EOS);
    v
}

/// Builds the reward source for one item.
pub fn reward_spec<'a>(
    kind: SampleReward,
    item: &TrainItem<'a>,
    estimator: Option<&'a RewardEstimator>,
) -> Result<RewardSpec<'a>> {
    Ok(match kind {
        SampleReward::SentenceBleu { smoothing } => RewardSpec::SentenceBleu {
            reference: item
                .reference
                .ok_or_else(|| invalid("sentence BLEU rewards need a reference"))?,
            smoothing,
        },
        SampleReward::Recall { matcher } => RewardSpec::Recall {
            query: item
                .query
                .ok_or_else(|| invalid("recall rewards need a query"))?,
            matcher,
        },
        SampleReward::Estimated => RewardSpec::Estimated {
            estimator: estimator.ok_or_else(|| invalid("estimated rewards need an estimator"))?,
            source: item.source,
        },
    })
}

/// Scores fixed candidate translations for one item.
pub fn score_candidates(
    policy: &Policy,
    kind: SampleReward,
    item: &TrainItem<'_>,
    estimator: Option<&RewardEstimator>,
    candidates: Vec<Vec<TokenId>>,
    word_level: bool,
) -> Result<Vec<Sample>> {
    let spec = reward_spec(kind, item, estimator)?;
    candidates
        .into_iter()
        .map(|tokens| {
            let reward = spec.score(&tokens, policy.trg_vocab())?;
            let token_rewards = if word_level {
                spec.token_rewards(&tokens, policy.trg_vocab())?
            } else {
                Vec::new()
            };
            Ok(Sample {
                tokens,
                reward,
                token_rewards,
            })
        })
        .collect()
}

/// What to sample for each item and how to score it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplePlan {
    pub k: usize,
    pub reward: SampleReward,
    /// Drop repeated samples (keeping first occurrences) so the result is a set.
    pub distinct: bool,
    /// Also compute word-level rewards.
    pub word_level: bool,
}

/// Draws and scores samples for one item.
pub fn draw_samples(
    policy: &Policy,
    item: &TrainItem<'_>,
    plan: &SamplePlan,
    seed: u64,
    estimator: Option<&RewardEstimator>,
) -> Result<Vec<Sample>> {
    let mut seqs: Vec<Vec<TokenId>> = Vec::with_capacity(plan.k);
    for s in policy.sample(item.source, plan.k, seed)? {
        if !plan.distinct || !seqs.contains(&s.tokens) {
            seqs.push(s.tokens);
        }
    }
    score_candidates(policy, plan.reward, item, estimator, seqs, plan.word_level)
}

/// SplitMix64 mixing of a base seed with two counters.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
