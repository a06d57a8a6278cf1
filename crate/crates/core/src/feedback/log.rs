use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{TokenId, Vocabulary};
use crate::rewards::Query;

/// How the logging policy produced its one-best translations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DecodeMode {
    #[default]
    Greedy,
    Beam {
        size: usize,
        #[serde(default)]
        length_normalize: bool,
    },
}

/// One logged interaction: a source, the translation that was shown and
/// whatever feedback came back for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub id: u64,
    /// Whitespace-joined source tokens.
    pub src: String,
    /// Whitespace-joined logged translation.
    pub trg: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<Query>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings: Option<Vec<u8>>,
    /// Tag of the logging policy.
    pub policy: String,
}

impl LogEntry {
    pub fn source_tokens(&self) -> Vec<&str> {
        self.src.split_whitespace().collect()
    }

    pub fn translation_tokens(&self) -> Vec<&str> {
        self.trg.split_whitespace().collect()
    }

    pub fn source_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        vocab.encode(&self.src)
    }

    pub fn translation_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        vocab.encode(&self.trg)
    }

    pub fn require_reward(&self) -> Result<f64> {
        self.reward.ok_or(Error::MissingField {
            field: "reward",
            id: self.id,
        })
    }

    pub fn require_query(&self) -> Result<&Query> {
        self.query.as_ref().ok_or(Error::MissingField {
            field: "query",
            id: self.id,
        })
    }

    pub fn require_ratings(&self) -> Result<&[u8]> {
        self.ratings.as_deref().ok_or(Error::MissingField {
            field: "ratings",
            id: self.id,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.reward {
            if !(0.0..=1.0).contains(&r) {
                return Err(invalid(format!("entry {}: reward {r} outside [0, 1]", self.id)));
            }
        }
        if let Some(rs) = &self.ratings {
            if rs.is_empty() || rs.iter().any(|r| !(1..=5).contains(r)) {
                return Err(invalid(format!("entry {}: ratings must be non-empty and in 1..=5", self.id)));
            }
        }
        Ok(())
    }
}

/// Provenance of a log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    /// Fingerprint of the logging policy's parameters.
    pub policy_hash: String,
    pub decode: DecodeMode,
    pub seed: u64,
    /// Feedback and filtering operations applied so far, in order.
    #[serde(default)]
    pub history: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: LogMeta,
}

/// An ordered log with unique entry ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackLog {
    meta: LogMeta,
    entries: Vec<LogEntry>,
}

impl FeedbackLog {
    pub fn new(meta: LogMeta, entries: Vec<LogEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(invalid(format!("duplicate log id {}", e.id)));
            }
            e.validate()?;
        }
        Ok(FeedbackLog { meta, entries })
    }

    pub fn meta(&self) -> &LogMeta {
        &self.meta
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_parts(self) -> (LogMeta, Vec<LogEntry>) {
        (self.meta, self.entries)
    }

    /// Rebuilds the log with transformed entries and one more history item.
    pub(crate) fn derive(&self, note: String, entries: Vec<LogEntry>) -> Result<Self> {
        let mut meta = self.meta.clone();
        meta.history.push(note);
        FeedbackLog::new(meta, entries)
    }

    /// All logged rewards, in order.
    pub fn rewards(&self) -> Result<Vec<f64>> {
        self.entries.iter().map(LogEntry::require_reward).collect()
    }

    pub fn write_jsonl<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, &MetaLine { meta: self.meta.clone() })?;
        w.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let first = lines
            .next()
            .ok_or_else(|| invalid("empty log file"))??;
        let meta: MetaLine = serde_json::from_str(&first)?;
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(serde_json::from_str(&line)?);
        }
        FeedbackLog::new(meta.meta, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }
}
