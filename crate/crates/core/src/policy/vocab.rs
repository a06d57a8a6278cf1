use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Closed whitespace-token vocabulary with four reserved entries at fixed ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from regular tokens; the reserved entries are
    /// prepended. Tokens are lowercased.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(|t| normalize(t.as_ref())));
        Self::from_full_list(all)
    }

    fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(invalid("vocabulary must start with the reserved tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(invalid(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Number of entries including the reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Id of a token; unknown strings map to [`UNK`].
    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(&normalize(token)).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&normalize(token))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::OutOfVocabulary {
                id,
                size: self.tokens.len(),
            })
    }

    /// Regular (non-reserved) tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Lowercases and splits on whitespace, then maps each token to its id.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Token strings up to the first end-of-sequence, skipping padding and
    /// begin markers.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            out.push(self.token(id)?.to_string());
        }
        Ok(out)
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id >= self.tokens.len()) {
            Some(&id) => Err(Error::OutOfVocabulary {
                id,
                size: self.tokens.len(),
            }),
            None => Ok(()),
        }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_full_list(tokens)
    }
}

/// Token normalization shared by vocabularies, rewards and metrics.
pub fn normalize(token: &str) -> String {
    token.to_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(BOS).unwrap(), "<s>");
        assert_eq!(v.token(EOS).unwrap(), "</s>");
        assert_eq!(v.token(UNK).unwrap(), "<unk>");
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn lookup_and_reverse_are_inverse() {
        let v = Vocabulary::new(["Lock", "bike", "red"]).unwrap();
        for t in v.regular_tokens() {
            assert_eq!(v.token(v.id(t)).unwrap(), t);
        }
        assert_eq!(v.id("LOCK"), v.id("lock"));
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn duplicates_are_rejected() {
        assert!(Vocabulary::new(["a", "A"]).is_err());
        assert!(Vocabulary::new(["</s>"]).is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::new(["x", "y"]).unwrap();
        let ids = vec![BOS, v.id("x"), v.id("y"), EOS, v.id("x")];
        assert_eq!(v.decode(&ids).unwrap(), vec!["x", "y"]);
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::new(["x", "y"]).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
        assert!(serde_json::from_str::<Vocabulary>("[\"x\"]").is_err());
    }
}
