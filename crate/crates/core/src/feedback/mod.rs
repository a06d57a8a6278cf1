//! Feedback logs: creation by a logging policy, simulated rewards, star
//! ratings and queries, filtering and perturbation, plus the synthetic
//! translation task the simulations run on.

mod filter;
mod log;
mod simulate;
mod synthetic;

pub use filter::{filter_log, filter_query_pairs, random_sublog, Predicate, QueryPair};
pub use log::{DecodeMode, FeedbackLog, LogEntry, LogMeta};
pub use simulate::{
    attach_queries, attach_sbleu_feedback, average_ratings, create_log, perturb_log, sbleu_scores,
    simulate_queries, simulate_star_feedback, StarNoise,
};
pub use synthetic::{Domain, Pair, SyntheticTask, TaskConfig};
