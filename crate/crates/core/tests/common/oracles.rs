//! Brute-force reference implementations for the scoring functions.

use std::collections::HashMap;

pub fn edit_distance(a: &str, b: &str) -> usize {
    fn go(a: &[char], b: &[char], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j, memo)
                .min(go(a, b, i, j + 1, memo))
                .min(go(a, b, i + 1, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    go(&a, &b, 0, 0, &mut HashMap::new())
}

pub fn word_match(w: &str, q: &[&str]) -> bool {
    let w = w.to_lowercase();
    let mut found = false;
    for t in q {
        if t.to_lowercase() == w {
            found = true;
        }
    }
    found
}

/// Integer form of `dist < max(3, 0.3 |w|)`: `10 dist < max(30, 3 |w|)`.
pub fn soft_match(w: &str, q: &[&str]) -> bool {
    let w = w.to_lowercase();
    let len = w.chars().count();
    q.iter().any(|t| 10 * edit_distance(&w, &t.to_lowercase()) < (3 * len).max(30))
}

pub fn recall(y: &[&str], q: &[&str], soft: bool) -> f64 {
    let mut hits = 0;
    for w in y {
        if (soft && soft_match(w, q)) || (!soft && word_match(w, q)) {
            hits += 1;
        }
    }
    hits as f64 / y.len() as f64
}

/// Clipped n-gram matches and hypothesis n-gram count, by linear scans.
pub fn ngram_stats<T: PartialEq>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let count = |seq: &[T], gram: &[T]| -> usize {
        if seq.len() < n {
            return 0;
        }
        (0..=seq.len() - n).filter(|&i| &seq[i..i + n] == gram).count()
    };
    let mut matched = 0;
    let mut seen: Vec<&[T]> = Vec::new();
    for i in 0..=hyp.len() - n {
        let gram = &hyp[i..i + n];
        if seen.contains(&gram) {
            continue;
        }
        seen.push(gram);
        matched += count(hyp, gram).min(count(reference, gram));
    }
    (matched, hyp.len() - n + 1)
}

pub fn sentence_bleu<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut m, mut t) = ngram_stats(hyp, reference, n);
        if n >= 2 {
            m += 1;
            t += 1;
        }
        if m == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = f64::min(1.0, (1.0 - reference.len() as f64 / hyp.len() as f64).exp());
    (log_sum / 4.0).exp() * bp
}

pub fn corpus_bleu<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            let (a, b) = ngram_stats(h, r, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
    }
    if m.contains(&0) {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 0..4 {
        prod *= m[n] as f64 / t[n] as f64;
    }
    let bp = if hl > rl { 1.0 } else { (1.0 - rl as f64 / hl as f64).exp() };
    100.0 * prod.powf(0.25) * bp
}

use bandit_nmt::rewards::{self, Matcher, Query, Smoothing};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "candado", "candados", "bici", "bicicleta", "lock", "locks", "rojo", "roja", "new", "case",
    "cerradura", "Lock", "a", "ab",
];

fn random_word(rng: &mut ChaCha8Rng) -> String {
    if rng.gen_bool(0.6) {
        WORDS.choose(rng).unwrap().to_string()
    } else {
        let len = rng.gen_range(0..12);
        (0..len).map(|_| (b'a' + rng.gen_range(0..4u8)) as char).collect()
    }
}

fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize, vocab: usize) -> Vec<usize> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Runs `n` random instances of every scoring function against the oracles
/// and returns the number of disagreements.
pub fn metric_disagreements(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..n {
        let a = random_word(&mut rng);
        let b = random_word(&mut rng);
        bad += usize::from(rewards::edit_distance(&a, &b) != edit_distance(&a, &b));

        let q_len = rng.gen_range(1..4);
        let q_words: Vec<String> = (0..q_len)
            .map(|_| {
                let mut w = random_word(&mut rng);
                if w.is_empty() {
                    w.push('z');
                }
                w
            })
            .collect();
        let q_refs: Vec<&str> = q_words.iter().map(String::as_str).collect();
        let query = Query::new(&q_words).unwrap();
        bad += usize::from(rewards::word_match(&a, &query) != word_match(&a, &q_refs));
        bad += usize::from(rewards::soft_match(&a, &query) != soft_match(&a, &q_refs));

        let y_len = rng.gen_range(1..8);
        let y: Vec<String> = (0..y_len).map(|_| WORDS.choose(&mut rng).unwrap().to_string()).collect();
        let y_refs: Vec<&str> = y.iter().map(String::as_str).collect();
        for (matcher, soft) in [(Matcher::Exact, false), (Matcher::Soft, true)] {
            let got = rewards::recall(&y, &query, matcher).unwrap();
            bad += usize::from(got != recall(&y_refs, &q_refs, soft));
        }

        let h = random_sentence(&mut rng, 12, 5);
        let r = random_sentence(&mut rng, 12, 5);
        let got = rewards::sentence_bleu(&h, &r, 4, Smoothing::AddOne);
        bad += usize::from(got != sentence_bleu(&h, &r));
    }
    for _ in 0..(n / 20).max(1) {
        let size = rng.gen_range(1..60);
        let hyps: Vec<Vec<usize>> = (0..size).map(|_| random_sentence(&mut rng, 10, 6)).collect();
        let refs: Vec<Vec<usize>> = (0..size).map(|_| random_sentence(&mut rng, 10, 6)).collect();
        let got = rewards::corpus_bleu(&hyps, &refs).unwrap();
        bad += usize::from((got - corpus_bleu(&hyps, &refs)).abs() > 1e-9);
    }
    bad
}
