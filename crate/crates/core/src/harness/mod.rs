//! Experiment orchestration: configuration, checkpoints, evaluation,
//! significance testing and reports.

mod checkpoint;
mod config;
mod eval;
mod report;
mod run;
mod significance;

pub use checkpoint::{
    fingerprint, load_estimator, load_policy, read_checkpoint, save_estimator, save_policy,
    write_checkpoint, CheckpointHeader, HashCheck, ModelSpec,
};
pub use config::{
    ComparisonMetric, ComparisonSpec, DataConfig, EstimatorSpec, ExperimentConfig, LogSource,
    LogSpec, PretrainConfig, SystemSpec, TrainData, BASELINE,
};
pub use eval::{evaluate_hypotheses, evaluate_model, EvalItem, EvalResult, EvalSpec, Metric};
pub use report::{EstimatorSummary, LogSummary, RunReport, SeedResult, SystemReport};
pub use run::{
    build_dataset, run_experiment, Curve, Dataset, EpochRecord, FittedEstimator, OwnedItem,
    Pipeline, SentenceScores,
};
pub use significance::{approx_randomization_test, SignificanceResult};
