use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{normalize, Policy, TokenId};
use crate::rewards::{corpus_bleu, recall, sentence_bleu, Matcher, Query, Smoothing};
use crate::stats::mean;

/// One test sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub source: Vec<TokenId>,
    pub reference: Vec<String>,
    #[serde(default)]
    pub query: Option<Query>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Metric {
    CorpusBleu,
    QueryRecall { matcher: Matcher },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    /// 1 decodes greedily.
    pub beam_size: usize,
    pub length_normalize: bool,
    /// Matcher for query recall.
    pub matcher: Matcher,
    /// Rounds of approximate randomization.
    pub rounds: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            beam_size: 1,
            length_normalize: false,
            matcher: Matcher::Exact,
            rounds: 10_000,
        }
    }
}

/// Corpus metrics with the per-sentence values behind them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bleu: Option<f64>,
    /// Smoothed sentence BLEU of every hypothesis.
    pub sentence_bleu: Vec<f64>,
    /// Macro-averaged query recall.
    pub recall: Option<f64>,
    pub sentence_recall: Vec<f64>,
    pub hypotheses: Vec<Vec<String>>,
}

/// Decodes every source with the configured beam and scores the outputs.
pub fn evaluate_model(
    policy: &Policy,
    items: &[EvalItem],
    spec: &EvalSpec,
    metrics: &[Metric],
) -> Result<EvalResult> {
    let mut hyps = Vec::with_capacity(items.len());
    for item in items {
        let out = if spec.beam_size <= 1 {
            policy.greedy(&item.source)?
        } else {
            policy.beam_decode(&item.source, spec.beam_size, spec.length_normalize)?
        };
        hyps.push(policy.trg_vocab().decode(out.content())?);
    }
    evaluate_hypotheses(hyps, items, metrics)
}

/// Scores fixed hypotheses against the items' references and queries.
pub fn evaluate_hypotheses(
    hypotheses: Vec<Vec<String>>,
    items: &[EvalItem],
    metrics: &[Metric],
) -> Result<EvalResult> {
    if items.is_empty() {
        return Err(invalid("empty test set"));
    }
    if hypotheses.len() != items.len() {
        return Err(Error::LengthMismatch {
            left: hypotheses.len(),
            right: items.len(),
        });
    }
    let hyps: Vec<Vec<String>> = hypotheses
        .iter()
        .map(|h| h.iter().map(|t| normalize(t)).collect())
        .collect();
    let refs: Vec<Vec<String>> = items
        .iter()
        .map(|i| i.reference.iter().map(|t| normalize(t)).collect())
        .collect();
    let mut res = EvalResult {
        hypotheses,
        ..Default::default()
    };
    for metric in metrics {
        match *metric {
            Metric::CorpusBleu => {
                res.bleu = Some(corpus_bleu::<String, _, _>(&hyps, &refs)?);
                res.sentence_bleu = hyps
                    .iter()
                    .zip(&refs)
                    .map(|(h, r)| sentence_bleu(h, r, 4, Smoothing::AddOne))
                    .collect();
            }
            Metric::QueryRecall { matcher } => {
                res.sentence_recall = hyps
                    .iter()
                    .zip(items)
                    .enumerate()
                    .map(|(i, (h, item))| {
                        let q = item.query.as_ref().ok_or_else(|| {
                            invalid(format!("test item {i} has no query for query recall"))
                        })?;
                        if h.is_empty() {
                            Ok(0.0)
                        } else {
                            recall(h, q, matcher)
                        }
                    })
                    .collect::<Result<_>>()?;
                res.recall = Some(mean(&res.sentence_recall));
            }
        }
    }
    Ok(res)
}
