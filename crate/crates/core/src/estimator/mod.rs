//! The learned reward model used by the doubly controlled objective.

mod eval;
mod model;
mod train;

pub use eval::{evaluate_estimator, report, EstimatorEvalReport};
pub use model::{EstimatorConfig, RewardEstimator};
pub use train::{
    batch_gradient, bucket, bucket_weights, mse, train_estimator, Example, EstimatorTrainConfig,
    TrainingCurve, NUM_BUCKETS,
};
