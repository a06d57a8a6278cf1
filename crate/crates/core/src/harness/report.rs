use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::run::Curve;
use super::significance::SignificanceResult;
use crate::estimator::EstimatorEvalReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Test corpus BLEU.
    pub bleu: f64,
    /// Test query recall.
    pub recall: f64,
    pub curve: Curve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub bleu_mean: f64,
    pub bleu_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub seed: u64,
    pub log: String,
    pub size: usize,
    pub mean_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub seed: u64,
    pub log: String,
    pub eval: EstimatorEvalReport,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub systems: Vec<SystemReport>,
    pub significance: Vec<SignificanceResult>,
    pub logs: Vec<LogSummary>,
    pub estimators: Vec<EstimatorSummary>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn system(&self, name: &str) -> Option<&SystemReport> {
        self.systems.iter().find(|s| s.name == name)
    }

    pub fn comparison(&self, a: &str, b: &str, metric: &str) -> Option<&SignificanceResult> {
        self.significance
            .iter()
            .find(|s| s.a == a && s.b == b && s.metric == metric)
    }

    pub fn estimators_on(&self, log: &str) -> Vec<&EstimatorSummary> {
        self.estimators.iter().filter(|e| e.log == log).collect()
    }

    /// The report with the wall-clock time zeroed, for determinism checks.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}  (config {})", self.name, &self.config_hash[..12.min(self.config_hash.len())]);
        let _ = writeln!(out, "seeds: {:?}", self.seeds);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<16} {:>16} {:>16}", "Model", "Test BLEU", "Query recall");
        let _ = writeln!(out, "{}", "-".repeat(50));
        for s in &self.systems {
            let _ = writeln!(
                out,
                "{:<16} {:>8.2} ± {:<5.2} {:>8.2} ± {:<5.2}",
                s.name,
                s.bleu_mean,
                s.bleu_std,
                100.0 * s.recall_mean,
                100.0 * s.recall_std
            );
        }
        if !self.significance.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<28} {:>8} {:>10} {:>8}", "Comparison", "Metric", "Diff", "p");
            for c in &self.significance {
                let _ = writeln!(
                    out,
                    "{:<28} {:>8} {:>10.3} {:>8.4}",
                    format!("{} vs {}", c.a, c.b),
                    c.metric,
                    100.0 * c.difference,
                    c.p_value
                );
            }
        }
        if !self.estimators.is_empty() {
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<16} {:>6} {:>10} {:>10} {:>10}", "Estimator log", "Seed", "MSE", "Pearson", "Spearman");
            for e in &self.estimators {
                let _ = writeln!(
                    out,
                    "{:<16} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                    e.log,
                    e.seed,
                    e.eval.mse,
                    e.eval.pearson,
                    e.eval.spearman
                );
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "wall clock: {:.1}s", self.wall_clock_secs);
        out
    }
}
