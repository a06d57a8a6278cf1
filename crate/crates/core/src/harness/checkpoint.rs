//! Binary checkpoints: an 8-byte magic, a format version, a JSON header and
//! the raw little-endian parameter values.

use std::io::{Read, Write};
use std::path::Path;

use diffcore::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, RewardEstimator};
use crate::policy::{Policy, PolicyConfig, Vocabulary};

const MAGIC: &[u8; 8] = b"BNMTCKPT";
const VERSION: u32 = 1;

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn fingerprint(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Policy {
        config: PolicyConfig,
        src_vocab: Vocabulary,
        trg_vocab: Vocabulary,
    },
    Estimator {
        config: EstimatorConfig,
        src_vocab_size: usize,
        trg_vocab_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Hash of the experiment configuration that produced the weights.
    pub config_hash: String,
    pub model: ModelSpec,
    /// Parameter names and shapes, in storage order.
    pub tensors: Vec<(String, Vec<usize>)>,
    pub fingerprint: String,
}

/// What to do when a checkpoint's config hash differs from the expected one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HashCheck<'a> {
    /// Do not compare.
    Skip,
    /// Fail on mismatch.
    Require(&'a str),
    /// Warn on stderr and continue.
    Override(&'a str),
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, params: &ParamSet) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, t) in params.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, check: HashCheck<'_>) -> Result<(CheckpointHeader, ParamSet)> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| corrupt("truncated version"))?;
    if u32::from_le_bytes(word) != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| corrupt("truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(corrupt("implausible header length"));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| corrupt(&format!("header: {e}")))?;

    match check {
        HashCheck::Skip => {}
        HashCheck::Require(expected) | HashCheck::Override(expected) if header.config_hash != expected => {
            let err = Error::HashMismatch {
                expected: expected.to_string(),
                found: header.config_hash.clone(),
            };
            if let HashCheck::Require(_) = check {
                return Err(err);
            }
            eprintln!("warning: {err}; continuing because the override flag is set");
        }
        _ => {}
    }

    let mut params = ParamSet::new();
    let mut buf = [0u8; 8];
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| corrupt(&format!("truncated data in {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        params.insert(name.clone(), Tensor::new(shape.clone(), data)?)?;
    }
    if r.read(&mut buf)? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    if fingerprint(&params) != header.fingerprint {
        return Err(corrupt("parameter fingerprint mismatch"));
    }
    Ok((header, params))
}

fn header_for(config_hash: &str, model: ModelSpec, params: &ParamSet) -> CheckpointHeader {
    CheckpointHeader {
        config_hash: config_hash.to_string(),
        model,
        tensors: params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
        fingerprint: fingerprint(params),
    }
}

pub fn save_policy(policy: &Policy, config_hash: &str, path: &Path) -> Result<()> {
    let model = ModelSpec::Policy {
        config: policy.config().clone(),
        src_vocab: policy.src_vocab().clone(),
        trg_vocab: policy.trg_vocab().clone(),
    };
    let header = header_for(config_hash, model, policy.params());
    write_checkpoint(std::fs::File::create(path)?, &header, policy.params())
}

pub fn load_policy(path: &Path, check: HashCheck<'_>) -> Result<Policy> {
    let (header, params) = read_checkpoint(std::fs::File::open(path)?, check)?;
    match header.model {
        ModelSpec::Policy {
            config,
            src_vocab,
            trg_vocab,
        } => Policy::from_parts(config, src_vocab, trg_vocab, params),
        ModelSpec::Estimator { .. } => Err(Error::Checkpoint("expected a policy checkpoint".into())),
    }
}

pub fn save_estimator(
    est: &RewardEstimator,
    src_vocab_size: usize,
    trg_vocab_size: usize,
    config_hash: &str,
    path: &Path,
) -> Result<()> {
    let model = ModelSpec::Estimator {
        config: est.config().clone(),
        src_vocab_size,
        trg_vocab_size,
    };
    let header = header_for(config_hash, model, est.params());
    write_checkpoint(std::fs::File::create(path)?, &header, est.params())
}

pub fn load_estimator(path: &Path, check: HashCheck<'_>) -> Result<RewardEstimator> {
    let (header, params) = read_checkpoint(std::fs::File::open(path)?, check)?;
    match header.model {
        ModelSpec::Estimator {
            config,
            src_vocab_size,
            trg_vocab_size,
        } => RewardEstimator::from_parts(config, params, src_vocab_size, trg_vocab_size),
        ModelSpec::Policy { .. } => Err(Error::Checkpoint("expected an estimator checkpoint".into())),
    }
}
