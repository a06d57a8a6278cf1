use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Paired approximate randomization test on per-sentence scores.
///
/// Each round swaps the two systems' scores of every sentence with
/// probability 1/2 and counts rounds whose absolute mean difference reaches
/// the observed one. Returns `(count + 1) / (rounds + 1)`.
pub fn approx_randomization_test(a: &[f64], b: &[f64], rounds: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() || rounds == 0 {
        return Err(invalid("randomization needs at least one sentence and one round"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed: f64 = diffs.iter().sum::<f64>().abs();
    // Shuffles that equal the observed statistic up to summation rounding count.
    let tol = 1e-9 * (1.0 + diffs.iter().map(|d| d.abs()).sum::<f64>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..rounds {
        let mut s = 0.0;
        for &d in &diffs {
            s += if rng.gen::<bool>() { -d } else { d };
        }
        if s.abs() >= observed - tol {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (rounds + 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub a: String,
    pub b: String,
    pub metric: String,
    /// Mean of `a` minus mean of `b`, over all paired scores.
    pub difference: f64,
    pub p_value: f64,
}
