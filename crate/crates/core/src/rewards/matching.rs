//! Word matching against user search queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::normalize;

/// Normalized, non-empty sequence of search terms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Query {
    tokens: Vec<String>,
}

impl Query {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(|t| normalize(t.as_ref())).collect();
        if tokens.is_empty() || tokens.iter().any(String::is_empty) {
            return Err(Error::EmptySequence);
        }
        Ok(Query { tokens })
    }

    /// Splits on whitespace.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.split_whitespace())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Query {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Query::new(tokens)
    }
}

impl From<Query> for Vec<String> {
    fn from(q: Query) -> Self {
        q.tokens
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    #[default]
    Exact,
    /// Exact match or small edit distance to some query term.
    Soft,
}

impl Matcher {
    pub fn matches(self, w: &str, q: &Query) -> bool {
        match self {
            Matcher::Exact => word_match(w, q),
            Matcher::Soft => soft_match(w, q),
        }
    }
}

/// 1 iff `w` occurs in the query after normalization.
pub fn word_match(w: &str, q: &Query) -> bool {
    let w = normalize(w);
    q.tokens.contains(&w)
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Exact match, or edit distance below `max(3, 0.3 * |w|)` to some query term.
pub fn soft_match(w: &str, q: &Query) -> bool {
    let w = normalize(w);
    let threshold = f64::max(3.0, 0.3 * w.chars().count() as f64);
    q.tokens
        .iter()
        .any(|t| *t == w || (edit_distance(&w, t) as f64) < threshold)
}

/// Fraction of tokens in `y` that match the query.
pub fn recall<S: AsRef<str>>(y: &[S], q: &Query, matcher: Matcher) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptySequence);
    }
    let hits = y.iter().filter(|w| matcher.matches(w.as_ref(), q)).count();
    Ok(hits as f64 / y.len() as f64)
}
