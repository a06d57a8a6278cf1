//! The translation policy: vocabulary, attentional encoder-decoder, decoding.

mod decode;
mod model;
mod vocab;

pub use decode::ScoredSequence;
pub use model::{AttentionKind, Dropout, Encoded, Policy, PolicyConfig, TokenScores};
pub use vocab::{normalize, TokenId, Vocabulary, BOS, EOS, PAD, UNK};
