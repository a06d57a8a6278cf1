//! Reward sources for training objectives.

use super::bleu::{sentence_bleu, Smoothing};
use super::matching::{recall, Matcher, Query};
use crate::error::{invalid, Result};
use crate::estimator::RewardEstimator;
use crate::policy::{TokenId, Vocabulary, EOS};

/// Where the reward Δ of a translation comes from.
#[derive(Clone, Copy, Debug)]
pub enum RewardSpec<'a> {
    /// A reward logged for one fixed translation; cannot score other outputs.
    DirectLogged(f64),
    /// Smoothed sentence BLEU against a (pseudo-)reference.
    SentenceBleu {
        reference: &'a [TokenId],
        smoothing: Smoothing,
    },
    /// Query recall with the given word matcher.
    Recall { query: &'a Query, matcher: Matcher },
    /// The learned estimator's prediction for `(source, translation)`.
    Estimated {
        estimator: &'a RewardEstimator,
        source: &'a [TokenId],
    },
}

fn strip_eos(ids: &[TokenId]) -> &[TokenId] {
    match ids.last() {
        Some(&EOS) => &ids[..ids.len() - 1],
        _ => ids,
    }
}

impl RewardSpec<'_> {
    /// Whether arbitrary sampled outputs can be scored.
    pub fn can_score_samples(&self) -> bool {
        !matches!(self, RewardSpec::DirectLogged(_))
    }

    /// Sequence reward in [0, 1] for a hypothesis (a trailing end-of-sequence
    /// marker is ignored). Empty hypotheses score 0.
    pub fn score(&self, hyp: &[TokenId], vocab: &Vocabulary) -> Result<f64> {
        let content = strip_eos(hyp);
        let r = match *self {
            RewardSpec::DirectLogged(r) => r,
            RewardSpec::SentenceBleu {
                reference,
                smoothing,
            } => sentence_bleu(content, strip_eos(reference), 4, smoothing),
            RewardSpec::Recall { query, matcher } => {
                if content.is_empty() {
                    0.0
                } else {
                    let words = vocab.decode(content)?;
                    recall(&words, query, matcher)?
                }
            }
            RewardSpec::Estimated { estimator, source } => estimator.predict(source, hyp)?,
        };
        if !(0.0..=1.0).contains(&r) {
            return Err(invalid(format!("reward {r} outside [0, 1]")));
        }
        Ok(r)
    }

    /// Word-level rewards aligned with `hyp`: the matcher's 0/1 score for each
    /// token, and 1 for the end-of-sequence marker. Only query recall
    /// provides word-level rewards.
    pub fn token_rewards(&self, hyp: &[TokenId], vocab: &Vocabulary) -> Result<Vec<f64>> {
        let RewardSpec::Recall { query, matcher } = *self else {
            return Err(invalid("word-level rewards need a query"));
        };
        hyp.iter()
            .map(|&id| {
                if id == EOS {
                    Ok(1.0)
                } else {
                    let w = vocab.token(id)?;
                    Ok(if matcher.matches(w, query) { 1.0 } else { 0.0 })
                }
            })
            .collect()
    }
}
