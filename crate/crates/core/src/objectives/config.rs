use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::rewards::{Matcher, Smoothing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Mle,
    Mrt,
    WMrt,
    Mix,
    WMix,
    El,
    Dpm,
    Dc,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Mle => "MLE",
            ObjectiveKind::Mrt => "MRT",
            ObjectiveKind::WMrt => "W-MRT",
            ObjectiveKind::Mix => "MIX",
            ObjectiveKind::WMix => "W-MIX",
            ObjectiveKind::El => "EL",
            ObjectiveKind::Dpm => "DPM",
            ObjectiveKind::Dc => "DC",
        }
    }

    pub fn uses_samples(self) -> bool {
        !matches!(self, ObjectiveKind::Mle | ObjectiveKind::Dpm)
    }

    pub fn word_level(self) -> bool {
        matches!(self, ObjectiveKind::WMrt | ObjectiveKind::WMix)
    }
}

/// How sampled translations are scored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SampleReward {
    /// Sentence BLEU against the item's (pseudo-)reference.
    SentenceBleu {
        #[serde(default)]
        smoothing: Smoothing,
    },
    /// Query recall against the item's query.
    Recall { matcher: Matcher },
    /// The reward estimator's prediction.
    Estimated,
}

impl Default for SampleReward {
    fn default() -> Self {
        SampleReward::SentenceBleu {
            smoothing: Smoothing::AddOne,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Sharpness of the renormalized sample distribution.
    pub alpha: f64,
    /// Weight of the likelihood term in (W-)MIX.
    pub lambda: f64,
    /// Samples per source.
    pub k: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sample_reward: SampleReward,
    /// Use length-normalized probabilities in DPM and DC.
    pub length_normalize: bool,
    /// Lower bound applied to each word reward in W-MRT.
    pub reward_floor: f64,
    /// Learning-rate multiplier for fine-tuning the estimator during DC; 0 disables.
    pub estimator_loss_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Mle,
            alpha: 0.005,
            lambda: 0.05,
            k: 5,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            batch_size: 10,
            seed: 0,
            sample_reward: SampleReward::default(),
            length_normalize: true,
            reward_floor: 0.0,
            estimator_loss_weight: 0.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("{}: {m}", self.kind.name())));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.lambda >= 0.0) {
            return fail("lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.reward_floor) {
            return fail("reward floor must lie in [0, 1]");
        }
        match self.kind {
            ObjectiveKind::Mrt | ObjectiveKind::WMrt | ObjectiveKind::Mix | ObjectiveKind::WMix => {
                if !(self.alpha > 0.0) {
                    return fail("alpha must be positive");
                }
                if self.k < 2 {
                    return fail("k must be at least 2");
                }
            }
            ObjectiveKind::El if self.k == 0 => return fail("k must be at least 1"),
            _ => {}
        }
        if self.kind.word_level() && !matches!(self.sample_reward, SampleReward::Recall { .. }) {
            return fail("word-level objectives need a recall sample reward");
        }
        Ok(())
    }
}
