//! Training objectives over the policy parameters: likelihood, minimum risk
//! (sequence- and word-level), their mixtures, expected reward, and the two
//! counterfactual objectives for deterministically logged feedback.

mod baseline;
mod config;
mod losses;
mod samples;
mod steps;

pub use baseline::{update_baseline, BaselineState};
pub use config::{ObjectiveConfig, ObjectiveKind, SampleReward};
pub use losses::{
    dc_objective, dpm_objective, el_surrogate, mix_objective, mle_objective, mrt_objective,
    renormalize_q, wmrt_objective, word_reward_product,
};
pub use samples::{
    derive_seed, draw_samples, reward_spec, score_candidates, Sample, SamplePlan, TrainItem,
};
pub use steps::{
    dc_step, dpm_step, el_step, gradient_of, mix_step, mle_step, mrt_step, wmrt_step, StepStats,
    Trainer,
};
