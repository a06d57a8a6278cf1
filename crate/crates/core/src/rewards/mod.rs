//! Reward and evaluation scores: word matching, query recall and BLEU.

mod bleu;
mod matching;
mod spec;

pub use bleu::{corpus_bleu, sentence_bleu, Smoothing};
pub use matching::{edit_distance, recall, soft_match, word_match, Matcher, Query};
pub use spec::RewardSpec;

/// Maps a 1-5 star rating onto [0, 1].
pub fn rescale_stars(stars: f64) -> f64 {
    (stars - 1.0) / 4.0
}
