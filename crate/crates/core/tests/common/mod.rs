#![allow(dead_code)]

use bandit_nmt::policy::{AttentionKind, Policy, PolicyConfig, Vocabulary};

pub fn tiny_config(attention: AttentionKind, max_len: usize) -> PolicyConfig {
    PolicyConfig {
        embed_size: 2,
        hidden_size: 2,
        attention_size: 2,
        max_len,
        attention,
        dropout: 0.0,
        init_scale: 1.0,
    }
}

/// Policy with two source words and `trg_words` regular target words.
pub fn tiny_policy(attention: AttentionKind, trg_words: &[&str], max_len: usize, seed: u64) -> Policy {
    let src = Vocabulary::new(["s1", "s2"]).unwrap();
    let trg = Vocabulary::new(trg_words.iter().copied()).unwrap();
    Policy::new(tiny_config(attention, max_len), src, trg, seed).unwrap()
}

/// Every token sequence over `outputs` that ends in `eos` within `cap` steps.
pub fn finished_sequences(outputs: &[usize], eos: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..cap {
        let mut next = Vec::new();
        for prefix in &frontier {
            for &t in outputs {
                let mut s = prefix.clone();
                s.push(t);
                if t == eos {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

pub mod oracles;
pub mod objective_checks;

/// Every sequence the sampler can emit with `cap` steps: finished ones plus
/// the unfinished sequences of exactly `cap` tokens.
pub fn full_space(outputs: &[usize], eos: usize, cap: usize) -> Vec<Vec<usize>> {
    let mut all = finished_sequences(outputs, eos, cap);
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..cap {
        frontier = frontier
            .iter()
            .flat_map(|p| {
                outputs.iter().filter(|&&t| t != eos).map(move |&t| {
                    let mut s = p.clone();
                    s.push(t);
                    s
                })
            })
            .collect();
    }
    all.extend(frontier);
    all
}
