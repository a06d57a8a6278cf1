//! Scoring, ancestral sampling and beam search over a [`Policy`].

use std::cmp::Ordering;

use diffcore::{Graph, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Encoded, Policy};
use super::vocab::{TokenId, BOS, EOS};
use crate::error::{invalid, Result};

/// A target sequence with its log-probability under the policy that produced
/// or scored it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    /// Token ids, ending with end-of-sequence when `finished`.
    pub tokens: Vec<TokenId>,
    pub total: f64,
    pub per_token: Vec<f64>,
    /// False when the length cap was hit before end-of-sequence.
    pub finished: bool,
}

impl ScoredSequence {
    /// Tokens without the trailing end-of-sequence marker.
    pub fn content(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Total log-probability, divided by length when `normalize` is set.
    pub fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.total / self.tokens.len() as f64
        } else {
            self.total
        }
    }
}

impl Policy {
    /// Log-probability of `y` given `x`, evaluated without building gradients.
    pub fn log_prob(&self, x: &[TokenId], y: &[TokenId]) -> Result<ScoredSequence> {
        let mut g = Graph::new(self.params());
        let scores = self.score(&mut g, x, y, None)?;
        let per_token: Vec<f64> = scores.per_token.iter().map(|&v| g.scalar(v)).collect();
        Ok(ScoredSequence {
            tokens: y.to_vec(),
            total: g.scalar(scores.total),
            per_token,
            finished: y.last() == Some(&EOS),
        })
    }

    /// Geometric mean of the per-token probabilities of `y`.
    pub fn length_normalized_prob(&self, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let s = self.log_prob(x, y)?;
        Ok((s.total / y.len() as f64).exp())
    }

    /// Draws `k` sequences ancestrally from the per-step distributions.
    pub fn sample(&self, x: &[TokenId], k: usize, seed: u64) -> Result<Vec<ScoredSequence>> {
        if k == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(self.params());
        let enc = self.encode(&mut g, x, None)?;
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            out.push(self.sample_one(&mut g, &enc, &mut rng)?);
        }
        Ok(out)
    }

    fn sample_one(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        rng: &mut ChaCha8Rng,
    ) -> Result<ScoredSequence> {
        let mut state = enc.init_state;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut per_token = Vec::new();
        for _ in 0..self.config().max_len {
            let (logp, s) = self.step(g, enc, state, prev, None)?;
            let row = g.value(logp).data();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut choice = row.len() - 1;
            for (i, lp) in row.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    choice = i;
                    break;
                }
            }
            let tok = self.output_token(choice);
            tokens.push(tok);
            per_token.push(row[choice]);
            state = s;
            prev = tok;
            if tok == EOS {
                break;
            }
        }
        Ok(finish(tokens, per_token))
    }

    /// Argmax decoding; ties go to the smallest token id.
    pub fn greedy(&self, x: &[TokenId]) -> Result<ScoredSequence> {
        let mut g = Graph::new(self.params());
        let enc = self.encode(&mut g, x, None)?;
        let mut state = enc.init_state;
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut per_token = Vec::new();
        for _ in 0..self.config().max_len {
            let (logp, s) = self.step(&mut g, &enc, state, prev, None)?;
            let row = g.value(logp).data();
            let mut best = 0;
            for (i, &lp) in row.iter().enumerate() {
                if lp > row[best] {
                    best = i;
                }
            }
            let tok = self.output_token(best);
            tokens.push(tok);
            per_token.push(row[best]);
            state = s;
            prev = tok;
            if tok == EOS {
                break;
            }
        }
        Ok(finish(tokens, per_token))
    }

    /// Beam search returning the best finished hypothesis.
    ///
    /// Searches are run with every width from 1 up to `beam_size` and the best
    /// result over all of them is kept, so a wider beam can never return a
    /// worse hypothesis than a narrower one. Equal scores go to the
    /// lexicographically smallest token sequence. When nothing finishes within
    /// the length cap the best unfinished hypothesis is returned with
    /// `finished == false`.
    pub fn beam_decode(
        &self,
        x: &[TokenId],
        beam_size: usize,
        length_normalize: bool,
    ) -> Result<ScoredSequence> {
        if beam_size == 0 {
            return Err(invalid("beam size must be at least 1"));
        }
        let mut g = Graph::new(self.params());
        let enc = self.encode(&mut g, x, None)?;
        let mut best: Option<ScoredSequence> = None;
        for width in 1..=beam_size {
            let cand = self.beam_search(&mut g, &enc, width, length_normalize)?;
            best = Some(match best {
                None => cand,
                Some(b) => {
                    if better(&cand, &b, length_normalize) {
                        cand
                    } else {
                        b
                    }
                }
            });
        }
        Ok(best.expect("beam size is at least 1"))
    }

    fn beam_search(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        width: usize,
        normalize: bool,
    ) -> Result<ScoredSequence> {
        struct Hyp {
            tokens: Vec<TokenId>,
            per_token: Vec<f64>,
            total: f64,
            state: Var,
        }
        let mut live = vec![Hyp {
            tokens: Vec::new(),
            per_token: Vec::new(),
            total: 0.0,
            state: enc.init_state,
        }];
        let mut finished: Vec<ScoredSequence> = Vec::new();
        for _ in 0..self.config().max_len {
            let mut expansions: Vec<(usize, usize, f64, Var)> = Vec::new();
            for (h, hyp) in live.iter().enumerate() {
                let prev = hyp.tokens.last().copied().unwrap_or(BOS);
                let (logp, s) = self.step(g, enc, hyp.state, prev, None)?;
                for (o, &lp) in g.value(logp).data().iter().enumerate() {
                    expansions.push((h, o, hyp.total + lp, s));
                }
            }
            let tokens_of = |e: &(usize, usize, f64, Var)| {
                let mut t = live[e.0].tokens.clone();
                t.push(self.output_token(e.1));
                t
            };
            expansions.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| tokens_of(a).cmp(&tokens_of(b)))
            });
            expansions.truncate(width);
            let mut next = Vec::with_capacity(width);
            for e in &expansions {
                let hyp = &live[e.0];
                let tok = self.output_token(e.1);
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let mut per_token = hyp.per_token.clone();
                per_token.push(e.2 - hyp.total);
                if tok == EOS {
                    finished.push(ScoredSequence {
                        tokens,
                        total: e.2,
                        per_token,
                        finished: true,
                    });
                } else {
                    next.push(Hyp {
                        tokens,
                        per_token,
                        total: e.2,
                        state: e.3,
                    });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        let pool: Vec<ScoredSequence> = if finished.is_empty() {
            live.into_iter()
                .map(|h| ScoredSequence {
                    tokens: h.tokens,
                    total: h.total,
                    per_token: h.per_token,
                    finished: false,
                })
                .collect()
        } else {
            finished
        };
        let mut best = None::<ScoredSequence>;
        for cand in pool {
            best = match best {
                Some(b) if !better(&cand, &b, normalize) => Some(b),
                _ => Some(cand),
            };
        }
        Ok(best.expect("beam keeps at least one hypothesis"))
    }
}

/// Whether `a` should be preferred over `b`: finished beats unfinished, then
/// higher score, then lexicographically smaller tokens.
fn better(a: &ScoredSequence, b: &ScoredSequence, normalize: bool) -> bool {
    if a.finished != b.finished {
        return a.finished;
    }
    let (sa, sb) = (a.score(normalize), b.score(normalize));
    if sa != sb {
        return sa > sb;
    }
    a.tokens < b.tokens
}

fn finish(tokens: Vec<TokenId>, per_token: Vec<f64>) -> ScoredSequence {
    let finished = tokens.last() == Some(&EOS);
    ScoredSequence {
        total: per_token.iter().sum(),
        tokens,
        per_token,
        finished,
    }
}
