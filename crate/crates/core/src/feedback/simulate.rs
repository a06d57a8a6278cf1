//! Logging, simulated feedback and perturbations.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::log::{DecodeMode, FeedbackLog, LogEntry, LogMeta};
use crate::error::{invalid, Error, Result};
use crate::harness::fingerprint;
use crate::objectives::derive_seed;
use crate::policy::{normalize, Policy, TokenId};
use crate::rewards::{rescale_stars, sentence_bleu, Query, Smoothing};
use crate::stats::average_ranks;

/// Decodes one translation per source with the logging policy.
pub fn create_log(
    policy: &Policy,
    sources: &[Vec<TokenId>],
    mode: DecodeMode,
    tag: &str,
) -> Result<FeedbackLog> {
    if sources.is_empty() {
        return Err(invalid("cannot log an empty source set"));
    }
    let mut entries = Vec::with_capacity(sources.len());
    for (i, x) in sources.iter().enumerate() {
        let out = match mode {
            DecodeMode::Greedy => policy.greedy(x)?,
            DecodeMode::Beam {
                size,
                length_normalize,
            } => policy.beam_decode(x, size, length_normalize)?,
        };
        entries.push(LogEntry {
            id: i as u64,
            src: policy.src_vocab().decode(x)?.join(" "),
            trg: policy.trg_vocab().decode(out.content())?.join(" "),
            reward: None,
            query: None,
            ratings: None,
            policy: tag.to_string(),
        });
    }
    let meta = LogMeta {
        policy_hash: fingerprint(policy.params()),
        decode: mode,
        seed: 0,
        history: Vec::new(),
    };
    FeedbackLog::new(meta, entries)
}

fn check_len(log: &FeedbackLog, n: usize) -> Result<()> {
    if log.len() != n {
        return Err(Error::LengthMismatch {
            left: log.len(),
            right: n,
        });
    }
    Ok(())
}

fn normalized<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| normalize(t.as_ref())).collect()
}

/// Smoothed sentence BLEU of every logged translation against its reference.
pub fn sbleu_scores<S: AsRef<str>>(log: &FeedbackLog, references: &[Vec<S>]) -> Result<Vec<f64>> {
    check_len(log, references.len())?;
    Ok(log
        .entries()
        .iter()
        .zip(references)
        .map(|(e, r)| {
            let hyp = normalized(&e.translation_tokens());
            sentence_bleu(&hyp, &normalized(r), 4, Smoothing::AddOne)
        })
        .collect())
}

/// Sets each entry's reward to its sentence BLEU against the reference.
pub fn attach_sbleu_feedback<S: AsRef<str>>(
    log: &FeedbackLog,
    references: &[Vec<S>],
) -> Result<FeedbackLog> {
    let scores = sbleu_scores(log, references)?;
    let entries = log
        .entries()
        .iter()
        .zip(scores)
        .map(|(e, r)| LogEntry {
            reward: Some(r),
            ..e.clone()
        })
        .collect();
    log.derive("sbleu".into(), entries)
}

/// Parameters of simulated star ratings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StarNoise {
    /// Fraction of entries rated five stars by every rater.
    pub five_star_mass: f64,
    /// Target Spearman correlation between latent quality and sentence BLEU.
    pub rank_correlation: f64,
    /// Relative mass of base levels 1..=4 among the remaining entries.
    pub level_mass: [f64; 4],
    /// Probability that an individual rating moves one star away from its
    /// entry's base level (staying within 1..=4).
    pub jitter: f64,
    pub min_ratings: usize,
    pub max_ratings: usize,
}

impl Default for StarNoise {
    fn default() -> Self {
        StarNoise {
            five_star_mass: 0.5,
            rank_correlation: 0.0,
            level_mass: [0.1, 0.15, 0.3, 0.45],
            jitter: 0.3,
            min_ratings: 1,
            max_ratings: 3,
        }
    }
}

impl StarNoise {
    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("star noise: {m}")));
        if !(0.0..=1.0).contains(&self.five_star_mass) || !(0.0..=1.0).contains(&self.jitter) {
            return fail("masses and probabilities must lie in [0, 1]");
        }
        if !(-1.0..=1.0).contains(&self.rank_correlation) {
            return fail("rank correlation must lie in [-1, 1]");
        }
        if self.level_mass.iter().any(|m| !(*m >= 0.0)) || self.level_mass.iter().sum::<f64>() <= 0.0 {
            return fail("level masses must be non-negative and not all zero");
        }
        if self.min_ratings == 0 || self.min_ratings > self.max_ratings {
            return fail("invalid ratings-per-entry range");
        }
        Ok(())
    }
}

/// Value at quantile `q` of `sorted` (nearest rank from below).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

/// Simulates 1-5 star ratings whose latent quality has the configured rank
/// correlation with sentence BLEU.
///
/// A latent score mixes the normal scores of the sentence-BLEU ranks with
/// independent normal noise (a Gaussian copula). Entries above the
/// `1 - five_star_mass` quantile of the latent score are rated five stars by
/// every rater; the rest get a base level from the latent quantiles and
/// jittered individual ratings. The reward is the rescaled average rating.
pub fn simulate_star_feedback<S: AsRef<str>>(
    log: &FeedbackLog,
    references: &[Vec<S>],
    noise: &StarNoise,
    seed: u64,
) -> Result<FeedbackLog> {
    noise.validate()?;
    let quality = sbleu_scores(log, references)?;
    let n = quality.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    // Spearman's rho of a bivariate normal is (6/pi) asin(r/2).
    let r = 2.0 * (std::f64::consts::PI * noise.rank_correlation / 6.0).sin();
    let ranks = average_ranks(&quality);
    let latent: Vec<f64> = ranks
        .iter()
        .map(|&rk| {
            let u = std_normal.inverse_cdf((rk - 0.5) / n as f64);
            let e: f64 = rng.sample(StandardNormal);
            r * u + (1.0 - r * r).max(0.0).sqrt() * e
        })
        .collect();
    let mut sorted = latent.clone();
    sorted.sort_by(f64::total_cmp);

    let five_cut = if noise.five_star_mass >= 1.0 {
        f64::NEG_INFINITY
    } else if noise.five_star_mass <= 0.0 {
        f64::INFINITY
    } else {
        quantile(&sorted, 1.0 - noise.five_star_mass)
    };
    let rest = 1.0 - noise.five_star_mass;
    let total: f64 = noise.level_mass.iter().sum();
    let mut cuts = [0.0; 3];
    let mut acc = 0.0;
    for (c, m) in cuts.iter_mut().zip(&noise.level_mass) {
        acc += m / total;
        *c = quantile(&sorted, acc * rest);
    }

    let mut entries = Vec::with_capacity(n);
    for (e, &z) in log.entries().iter().zip(&latent) {
        let count = rng.gen_range(noise.min_ratings..=noise.max_ratings);
        let ratings: Vec<u8> = if z > five_cut {
            vec![5; count]
        } else {
            let level = 1 + cuts.iter().filter(|&&c| z > c).count() as i32;
            (0..count)
                .map(|_| {
                    let mut v = level;
                    if rng.gen::<f64>() < noise.jitter {
                        v += if rng.gen::<bool>() { 1 } else { -1 };
                    }
                    v.clamp(1, 4) as u8
                })
                .collect()
        };
        let avg = average_ratings(&ratings)?;
        entries.push(LogEntry {
            reward: Some(rescale_stars(avg)),
            ratings: Some(ratings),
            ..e.clone()
        });
    }
    log.derive(
        format!(
            "stars(five_star_mass={}, rank_correlation={}, jitter={}, seed={seed})",
            noise.five_star_mass, noise.rank_correlation, noise.jitter
        ),
        entries,
    )
}

/// Arithmetic mean of star ratings.
pub fn average_ratings(ratings: &[u8]) -> Result<f64> {
    if ratings.is_empty() {
        return Err(Error::EmptySequence);
    }
    if let Some(r) = ratings.iter().find(|r| !(1..=5).contains(*r)) {
        return Err(invalid(format!("rating {r} outside 1..=5")));
    }
    Ok(ratings.iter().map(|&r| r as f64).sum::<f64>() / ratings.len() as f64)
}

/// One query per reference: a uniformly drawn subset of `min_len..=max_len`
/// distinct content tokens (tokens outside `stop`), kept in reference order.
pub fn simulate_queries<S: AsRef<str>>(
    references: &[Vec<S>],
    stop: &HashSet<String>,
    seed: u64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<Query>> {
    if min_len == 0 || min_len > max_len {
        return Err(invalid("invalid query length range"));
    }
    references
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut content: Vec<String> = Vec::new();
            for t in r {
                let t = normalize(t.as_ref());
                if !stop.contains(&t) && !content.contains(&t) {
                    content.push(t);
                }
            }
            if content.len() < min_len {
                return Err(invalid(format!(
                    "reference {i} has {} content tokens, fewer than {min_len}",
                    content.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
            let size = rng.gen_range(min_len..=max_len.min(content.len()));
            let mut picked = index::sample(&mut rng, content.len(), size).into_vec();
            picked.sort_unstable();
            Query::new(picked.into_iter().map(|j| content[j].as_str()))
        })
        .collect()
}

/// Attaches one query per entry.
pub fn attach_queries(log: &FeedbackLog, queries: &[Query]) -> Result<FeedbackLog> {
    check_len(log, queries.len())?;
    let entries = log
        .entries()
        .iter()
        .zip(queries)
        .map(|(e, q)| LogEntry {
            query: Some(q.clone()),
            ..e.clone()
        })
        .collect();
    log.derive("queries".into(), entries)
}

/// Shuffles rewards uniformly across entries, breaking their pairing with
/// translations.
pub fn perturb_log(log: &FeedbackLog, seed: u64) -> Result<FeedbackLog> {
    if log.len() < 2 {
        return Err(invalid("perturbation needs at least two entries"));
    }
    let mut rewards = log.rewards()?;
    rewards.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let entries = log
        .entries()
        .iter()
        .zip(rewards)
        .map(|(e, r)| LogEntry {
            reward: Some(r),
            ..e.clone()
        })
        .collect();
    log.derive(format!("perturb(seed={seed})"), entries)
}
