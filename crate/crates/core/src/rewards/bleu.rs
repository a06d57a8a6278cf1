//! Sentence- and corpus-level BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing applied to sentence-level n-gram precisions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Add one to matched and total counts for n >= 2.
    #[default]
    AddOne,
    None,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total hypothesis n-grams of order `n`.
fn clipped<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    f64::min(1.0, (1.0 - ref_len as f64 / hyp_len as f64).exp())
}

/// Smoothed sentence BLEU in [0, 1]. An empty hypothesis or reference scores 0.
pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize, smoothing: Smoothing) -> f64 {
    if hyp.is_empty() || reference.is_empty() || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (m, t) = clipped(hyp, reference, n);
        let (m, t) = match smoothing {
            Smoothing::AddOne if n >= 2 => (m + 1, t + 1),
            _ => (m, t),
        };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    (log_sum / max_n as f64).exp() * brevity_penalty(hyp.len(), reference.len())
}

/// Corpus BLEU in [0, 100] with pooled counts, no smoothing, 4-grams.
///
/// Tokens are compared as given; normalize them (e.g. lowercase) beforehand.
pub fn corpus_bleu<T: Eq + Hash, H: AsRef<[T]>, R: AsRef<[T]>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    const MAX_N: usize = 4;
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            left: hyps.len(),
            right: refs.len(),
        });
    }
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        if r.is_empty() {
            return Err(Error::EmptySequence);
        }
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_N {
            let (m, t) = clipped(h, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    Ok(100.0 * log_p.exp() * brevity_penalty(hyp_len, ref_len))
}
