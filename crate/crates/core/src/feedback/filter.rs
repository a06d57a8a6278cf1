//! Order-preserving selections of logs and query-title pairs.

use std::collections::HashSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::log::{FeedbackLog, LogEntry};
use super::simulate::average_ratings;
use crate::error::{invalid, Result};
use crate::policy::normalize;
use crate::rewards::Matcher;

/// Which entries a filter keeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Predicate {
    /// Average star rating exactly 5.
    FiveStar,
    /// Every query term is matched by some token of the translation.
    FullRecall { matcher: Matcher },
    /// Reward at least `threshold`.
    MinReward { threshold: f64 },
}

impl Predicate {
    pub fn name(&self) -> String {
        match self {
            Predicate::FiveStar => "five-star".into(),
            Predicate::FullRecall { matcher } => format!("full-recall({matcher:?})"),
            Predicate::MinReward { threshold } => format!("min-reward({threshold})"),
        }
    }

    pub fn accepts(&self, e: &LogEntry) -> Result<bool> {
        Ok(match *self {
            Predicate::FiveStar => average_ratings(e.require_ratings()?)? == 5.0,
            Predicate::FullRecall { matcher } => {
                let q = e.require_query()?;
                let words = e.translation_tokens();
                q.tokens().iter().all(|t| {
                    let single = crate::rewards::Query::new([t]).expect("query terms are non-empty");
                    words.iter().any(|w| matcher.matches(w, &single))
                })
            }
            Predicate::MinReward { threshold } => e.require_reward()? >= threshold,
        })
    }
}

/// Keeps the entries accepted by `predicate`, in order and unchanged.
pub fn filter_log(log: &FeedbackLog, predicate: Predicate) -> Result<FeedbackLog> {
    let mut kept = Vec::new();
    for e in log.entries() {
        if predicate.accepts(e)? {
            kept.push(e.clone());
        }
    }
    let note = format!("filter:{}", predicate.name());
    if log.meta().history.last() == Some(&note) {
        // Re-applying the same filter is a no-op, including for provenance.
        return Ok(log.clone());
    }
    log.derive(note, kept)
}

/// A uniformly drawn sublog of `n` entries, in original order.
pub fn random_sublog(log: &FeedbackLog, n: usize, seed: u64) -> Result<FeedbackLog> {
    if n > log.len() {
        return Err(invalid(format!("cannot draw {n} entries from a log of {}", log.len())));
    }
    let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), log.len(), n).into_vec();
    picked.sort_unstable();
    let entries = picked.into_iter().map(|i| log.entries()[i].clone()).collect();
    log.derive(format!("random-sublog(n={n}, seed={seed})"), entries)
}

/// A user query, its machine translation into the title language, the
/// title and the title's translation, all tokenized.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPair {
    pub query: Vec<String>,
    pub translated_query: Vec<String>,
    pub title: Vec<String>,
    pub translated_title: Vec<String>,
}

/// Drops pairs whose query translation is (a) identical to the query or
/// (b) has strictly more than 90% of its distinct words absent from the
/// title.
pub fn filter_query_pairs(pairs: &[QueryPair]) -> Vec<QueryPair> {
    let norm = |ts: &[String]| ts.iter().map(|t| normalize(t)).collect::<Vec<_>>();
    pairs
        .iter()
        .filter(|p| {
            let tq = norm(&p.translated_query);
            if norm(&p.query) == tq {
                return false;
            }
            let title: HashSet<String> = norm(&p.title).into_iter().collect();
            let types: HashSet<&String> = tq.iter().collect();
            if types.is_empty() {
                return true;
            }
            let absent = types.iter().filter(|t| !title.contains(**t)).count();
            // Integer form of absent / types > 0.9.
            10 * absent <= 9 * types.len()
        })
        .cloned()
        .collect()
}
