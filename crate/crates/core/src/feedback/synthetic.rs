//! A synthetic translation task with a controllable domain gap.
//!
//! Sources are strings over a small alphabet of symbols. The in-domain
//! translation maps every symbol to a pseudo-word and swaps the first two
//! positions. The out-of-domain variant maps a fraction of the symbols to
//! different words, except with probability `ood_keep_prob` per occurrence,
//! which leaves a baseline trained on it uncertain about exactly those
//! symbols.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Vocabulary;
use crate::rewards::edit_distance;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// Number of source symbols (at most 26; they are named `a`, `b`, ...).
    pub alphabet_size: usize,
    pub word_min_len: usize,
    pub word_max_len: usize,
    /// Minimum edit distance between any two target words.
    pub min_word_distance: usize,
    pub sentence_min_len: usize,
    pub sentence_max_len: usize,
    /// Fraction of symbols whose translation differs out of domain.
    pub ood_fraction: f64,
    /// Probability that an altered symbol still gets its in-domain word in
    /// out-of-domain data.
    pub ood_keep_prob: f64,
    /// Relative frequency of altered symbols in in-domain sources.
    pub in_domain_altered_weight: f64,
    /// Number of symbols whose words act as stop tokens for queries.
    pub stop_symbols: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            alphabet_size: 26,
            word_min_len: 5,
            word_max_len: 8,
            min_word_distance: 3,
            sentence_min_len: 3,
            sentence_max_len: 7,
            ood_fraction: 0.3,
            ood_keep_prob: 0.35,
            in_domain_altered_weight: 1.0,
            stop_symbols: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    InDomain,
    OutOfDomain,
}

/// A source sentence and its translation, as tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    config: TaskConfig,
    symbols: Vec<String>,
    words: Vec<String>,
    ood_words: Vec<Option<String>>,
    stop: Vec<usize>,
    src_vocab: Vocabulary,
    trg_vocab: Vocabulary,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        let fail = |m: &str| Err(Error::Config(format!("task: {m}")));
        let n = config.alphabet_size;
        if !(2..=26).contains(&n) {
            return fail("alphabet size must be in 2..=26");
        }
        if config.word_min_len == 0 || config.word_min_len > config.word_max_len {
            return fail("invalid word length range");
        }
        if config.sentence_min_len == 0 || config.sentence_min_len > config.sentence_max_len {
            return fail("invalid sentence length range");
        }
        if !(0.0..=1.0).contains(&config.ood_fraction) || !(0.0..=1.0).contains(&config.ood_keep_prob) {
            return fail("probabilities must lie in [0, 1]");
        }
        if !(config.in_domain_altered_weight > 0.0) {
            return fail("altered-symbol weight must be positive");
        }
        let altered_count = (config.ood_fraction * n as f64).round() as usize;
        if altered_count + config.stop_symbols >= n {
            return fail("too many altered and stop symbols for the alphabet");
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut vocab_words: Vec<String> = Vec::new();
        let mut fresh_word = |rng: &mut ChaCha8Rng| -> Result<String> {
            for _ in 0..10_000 {
                let len = rng.gen_range(config.word_min_len..=config.word_max_len);
                let w: String = (0..len)
                    .map(|i| {
                        let set = if i % 2 == 0 { CONSONANTS } else { VOWELS };
                        set[rng.gen_range(0..set.len())] as char
                    })
                    .collect();
                if vocab_words
                    .iter()
                    .all(|v| edit_distance(v, &w) >= config.min_word_distance)
                {
                    vocab_words.push(w.clone());
                    return Ok(w);
                }
            }
            Err(Error::Config("task: could not generate distinct target words".into()))
        };

        let symbols: Vec<String> = (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        let words = (0..n).map(|_| fresh_word(&mut rng)).collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut ood_words = vec![None; n];
        for &s in &order[..altered_count] {
            ood_words[s] = Some(fresh_word(&mut rng)?);
        }
        let mut stop = order[altered_count..altered_count + config.stop_symbols].to_vec();
        stop.sort_unstable();

        let src_vocab = Vocabulary::new(&symbols)?;
        let trg_vocab = Vocabulary::new(words.iter().chain(ood_words.iter().flatten()))?;
        Ok(SyntheticTask {
            config,
            symbols,
            words,
            ood_words,
            stop,
            src_vocab,
            trg_vocab,
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.config
    }

    pub fn src_vocab(&self) -> &Vocabulary {
        &self.src_vocab
    }

    pub fn trg_vocab(&self) -> &Vocabulary {
        &self.trg_vocab
    }

    /// In-domain word of every symbol, in symbol order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Indices of the symbols whose out-of-domain translation differs.
    pub fn altered_symbols(&self) -> Vec<usize> {
        (0..self.symbols.len()).filter(|&s| self.ood_words[s].is_some()).collect()
    }

    pub fn ood_word(&self, symbol: usize) -> Option<&str> {
        self.ood_words[symbol].as_deref()
    }

    /// Target words excluded from simulated queries.
    pub fn stop_words(&self) -> HashSet<String> {
        self.stop.iter().map(|&s| self.words[s].clone()).collect()
    }

    fn symbol_index(&self, token: &str) -> Result<usize> {
        self.symbols
            .iter()
            .position(|s| s == token)
            .ok_or_else(|| crate::error::invalid(format!("unknown source symbol {token:?}")))
    }

    /// Draws a source sentence; in-domain sources over-represent altered
    /// symbols by `in_domain_altered_weight`. Sentences made only of stop
    /// symbols are redrawn.
    pub fn sample_source<R: Rng>(&self, rng: &mut R, domain: Domain) -> Vec<usize> {
        let weights: Vec<f64> = (0..self.symbols.len())
            .map(|s| match (domain, self.ood_words[s].is_some()) {
                (Domain::InDomain, true) => self.config.in_domain_altered_weight,
                _ => 1.0,
            })
            .collect();
        let dist = WeightedIndex::new(&weights).expect("weights are positive");
        loop {
            let len = rng.gen_range(self.config.sentence_min_len..=self.config.sentence_max_len);
            let src: Vec<usize> = (0..len).map(|_| dist.sample(rng)).collect();
            if src.iter().any(|s| !self.stop.contains(s)) {
                return src;
            }
        }
    }

    fn reorder(mut words: Vec<String>) -> Vec<String> {
        if words.len() >= 2 {
            words.swap(0, 1);
        }
        words
    }

    /// The in-domain translation of a source given as symbol tokens.
    pub fn translate<S: AsRef<str>>(&self, source: &[S]) -> Result<Vec<String>> {
        let words = source
            .iter()
            .map(|t| Ok(self.words[self.symbol_index(t.as_ref())?].clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::reorder(words))
    }

    fn translate_indices<R: Rng>(&self, src: &[usize], domain: Domain, rng: &mut R) -> Vec<String> {
        let words = src
            .iter()
            .map(|&s| match (domain, &self.ood_words[s]) {
                (Domain::OutOfDomain, Some(w)) if rng.gen::<f64>() >= self.config.ood_keep_prob => {
                    w.clone()
                }
                _ => self.words[s].clone(),
            })
            .collect();
        Self::reorder(words)
    }

    /// `n` sentence pairs from one domain, reproducible by `seed`.
    pub fn corpus(&self, domain: Domain, n: usize, seed: u64) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let src = self.sample_source(&mut rng, domain);
                let target = self.translate_indices(&src, domain, &mut rng);
                Pair {
                    source: src.iter().map(|&s| self.symbols[s].clone()).collect(),
                    target,
                }
            })
            .collect()
    }
}
