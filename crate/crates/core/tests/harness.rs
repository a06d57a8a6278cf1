//! Configuration, checkpoints, evaluation, significance testing and whole
//! pipeline runs on a tiny configuration.

use std::path::{Path, PathBuf};

use tempfile::TempDir;

use bandit_nmt::harness::{
    approx_randomization_test, evaluate_hypotheses, load_estimator, load_policy, read_checkpoint,
    run_experiment, save_estimator, save_policy, EvalItem, ExperimentConfig, HashCheck, Metric,
    Pipeline, SentenceScores,
};
use bandit_nmt::estimator::{EstimatorConfig, RewardEstimator};
use bandit_nmt::rewards::{Matcher, Query};
use bandit_nmt::Error;
use proptest::prelude::*;

mod common;
use common::oracles;

const TINY: &str = r#"
name = "tiny"
seeds = [5]

[data]
pretrain = 400
log = 60
dev = 30
test = 40

[policy]
embed_size = 6
hidden_size = 6
attention_size = 6

[pretrain]
epochs = 2
batch_size = 16
lr = 0.01

[estimator]
logs = ["sbleu"]

[estimator.model]
embed_size = 4
filters = 2
max_width = 3
t_max = 10

[estimator.train]
epochs = 1

[[logs]]
name = "sbleu"
type = "sbleu"

[[logs]]
name = "stars"
type = "stars"

[[logs]]
name = "five"
type = "filter"
from = "stars"
predicate = { type = "five-star" }

[[systems]]
name = "MLE"
epochs = 1
data = { type = "references" }
objective = { kind = "mle", lr = 1e-3 }

[[systems]]
name = "DC"
epochs = 1
select_on_dev = true
data = { type = "log", log = "sbleu" }
objective = { kind = "dc", lr = 1e-4, sample_reward = { type = "estimated" } }
estimator_log = "sbleu"

[[systems]]
name = "NOOP"
epochs = 0
data = { type = "log", log = "five" }
objective = { kind = "mix", lr = 1e-3 }

[[comparisons]]
a = "MLE"
b = "BL"
metric = "bleu"
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn scratch(name: &str) -> TempDir {
    tempfile::Builder::new().prefix(name).tempdir().unwrap()
}

fn bits(p: &bandit_nmt::policy::Policy) -> Vec<(String, Vec<u64>)> {
    p.params()
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn config_toml_round_trip_keeps_hash() {
    let cfg = tiny();
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
}

#[test]
fn config_hash_ignores_out_dir_only() {
    let cfg = tiny();
    let mut moved = cfg.clone();
    moved.out_dir = Some("elsewhere".into());
    assert_eq!(moved.hash(), cfg.hash());
    let mut other = cfg.clone();
    other.seeds = vec![6];
    assert_ne!(other.hash(), cfg.hash());
    // Adding a system leaves the baseline identity alone.
    let mut more = cfg.clone();
    more.systems.pop();
    assert_ne!(more.hash(), cfg.hash());
    assert_eq!(more.baseline_hash(5), cfg.baseline_hash(5));
    assert_ne!(cfg.baseline_hash(5), cfg.baseline_hash(6));
}

#[test]
fn shipped_configs_validate() {
    for name in ["acceptance.toml", "quick.toml"] {
        ExperimentConfig::load(&repo_config(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn config_validation_rejects_dangling_names() {
    let bad = [
        TINY.replace("log = \"sbleu\" }", "log = \"missing\" }"),
        TINY.replace("estimator_log = \"sbleu\"", ""),
        TINY.replace("from = \"stars\"", "from = \"later\""),
        TINY.replace("a = \"MLE\"", "a = \"nobody\""),
        TINY.replace("name = \"NOOP\"", "name = \"MLE\""),
        TINY.replace("seeds = [5]", "seeds = []"),
        TINY.replace("lr = 0.01", "lr = 0.01\nlr_decay = 0.0"),
        TINY.replace("name = \"tiny\"", "name = \"tiny\"\nunknown_key = 1"),
    ];
    for text in bad {
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }
}

fn tiny_policy() -> (Pipeline, bandit_nmt::policy::Policy) {
    let pipe = Pipeline::new(tiny()).unwrap();
    let (bl, _) = pipe.pretrain(5).unwrap();
    (pipe, bl)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (pipe, bl) = tiny_policy();
    let tmp = scratch("ckpt");
    let dir = tmp.path();
    let path = dir.join("p.ckpt");
    save_policy(&bl, pipe.config_hash(), &path).unwrap();
    let back = load_policy(&path, HashCheck::Require(pipe.config_hash())).unwrap();
    assert_eq!(bits(&back), bits(&bl));
    assert_eq!(back.config(), bl.config());
    assert_eq!(back.trg_vocab(), bl.trg_vocab());

    // Saving the loaded model reproduces the file byte for byte.
    let again = dir.join("q.ckpt");
    save_policy(&back, pipe.config_hash(), &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    // Decoding is unchanged on 100 inputs.
    let sources = pipe.log_sources();
    assert!(sources.len() >= 60);
    let tests = pipe.test_items();
    let inputs: Vec<&Vec<usize>> = sources.iter().chain(tests.iter().map(|i| &i.source)).take(100).collect();
    assert_eq!(inputs.len(), 100);
    for x in inputs {
        assert_eq!(bl.greedy(x).unwrap(), back.greedy(x).unwrap());
    }
}

#[test]
fn checkpoint_hash_policy() {
    let (pipe, bl) = tiny_policy();
    let tmp = scratch("hash");
    let path = tmp.path().join("p.ckpt");
    save_policy(&bl, pipe.config_hash(), &path).unwrap();
    assert!(matches!(
        load_policy(&path, HashCheck::Require("not-the-hash")),
        Err(Error::HashMismatch { .. })
    ));
    let over = load_policy(&path, HashCheck::Override("not-the-hash")).unwrap();
    assert_eq!(bits(&over), bits(&bl));
    assert!(load_policy(&path, HashCheck::Skip).is_ok());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (pipe, bl) = tiny_policy();
    let tmp = scratch("corrupt");
    let path = tmp.path().join("p.ckpt");
    save_policy(&bl, pipe.config_hash(), &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut flipped = good.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x10;
    let mut magic = good.clone();
    magic[0] = b'X';
    let mut trailing = good.clone();
    trailing.extend_from_slice(&[0u8; 8]);
    let truncated = good[..good.len() - 5].to_vec();
    for bytes in [flipped, magic, trailing, truncated, Vec::new()] {
        assert!(matches!(
            read_checkpoint(bytes.as_slice(), HashCheck::Skip),
            Err(Error::Checkpoint(_))
        ));
    }
    // A policy file is not an estimator.
    assert!(matches!(load_estimator(&path, HashCheck::Skip), Err(Error::Checkpoint(_))));
}

#[test]
fn estimator_checkpoint_round_trip() {
    let cfg = EstimatorConfig {
        embed_size: 4,
        filters: 3,
        max_width: 3,
        t_max: 8,
        ..EstimatorConfig::default()
    };
    let est = RewardEstimator::new(cfg, 12, 15, 9).unwrap();
    let tmp = scratch("est");
    let path = tmp.path().join("e.ckpt");
    save_estimator(&est, 12, 15, "h", &path).unwrap();
    let back = load_estimator(&path, HashCheck::Require("h")).unwrap();
    let x = [4, 5, 6];
    for y in [vec![4, 7], vec![5, 6, 7, 8, 9, 10, 11, 12, 13, 14]] {
        assert_eq!(est.predict(&x, &y).unwrap().to_bits(), back.predict(&x, &y).unwrap().to_bits());
    }
}

#[test]
fn randomization_equal_scores_give_one() {
    let a = vec![0.3, 0.7, 0.1, 0.9];
    assert_eq!(approx_randomization_test(&a, &a, 1000, 1).unwrap(), 1.0);
}

#[test]
fn randomization_all_ones_against_zeros() {
    let a = vec![1.0; 20];
    let b = vec![0.0; 20];
    let p = approx_randomization_test(&a, &b, 10_000, 3).unwrap();
    // Only the two all-same-sign shuffles reach the observed difference
    // (probability 2^-19), so the estimate sits at its floor.
    assert!(p < 0.01, "p = {p}");
    assert!(p >= 1.0 / 10_001.0);
}

#[test]
fn randomization_errors() {
    assert!(matches!(
        approx_randomization_test(&[1.0], &[1.0, 2.0], 10, 0),
        Err(Error::LengthMismatch { .. })
    ));
    assert!(approx_randomization_test(&[], &[], 10, 0).is_err());
    assert!(approx_randomization_test(&[1.0], &[0.0], 0, 0).is_err());
}

#[test]
fn randomization_single_sentence_is_never_significant() {
    // Two equally likely labelings both reach the observed difference.
    let p = approx_randomization_test(&[1.0], &[0.0], 999, 4).unwrap();
    assert_eq!(p, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn randomization_is_symmetric_and_bounded(
        pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
        seed in 0u64..1000,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let p = approx_randomization_test(&a, &b, 300, seed).unwrap();
        let q = approx_randomization_test(&b, &a, 300, seed).unwrap();
        prop_assert_eq!(p, q);
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p, approx_randomization_test(&a, &b, 300, seed).unwrap());
    }
}

fn items_from(refs: &[&str], queries: &[&str]) -> Vec<EvalItem> {
    refs.iter()
        .zip(queries)
        .map(|(r, q)| EvalItem {
            source: vec![4],
            reference: r.split_whitespace().map(String::from).collect(),
            query: Some(Query::parse(q).unwrap()),
        })
        .collect()
}

#[test]
fn copying_references_scores_full_bleu() {
    let pipe = Pipeline::new(tiny()).unwrap();
    let items = pipe.test_items();
    let hyps: Vec<Vec<String>> = items.iter().map(|i| i.reference.clone()).collect();
    let res = evaluate_hypotheses(hyps, &items, &[Metric::CorpusBleu]).unwrap();
    assert_eq!(res.bleu, Some(100.0));
    assert!(res.sentence_bleu.iter().all(|&b| b == 1.0));
}

#[test]
fn references_cover_their_own_queries() {
    let pipe = Pipeline::new(tiny()).unwrap();
    let items = pipe.test_items();
    let hyps: Vec<Vec<String>> = items.iter().map(|i| i.reference.clone()).collect();
    let res = evaluate_hypotheses(
        hyps,
        &items,
        &[Metric::QueryRecall { matcher: Matcher::Exact }],
    )
    .unwrap();
    for (item, &got) in items.iter().zip(&res.sentence_recall) {
        let q = item.query.as_ref().unwrap();
        // Every query word is drawn from the reference.
        assert!(q.tokens().iter().all(|w| item.reference.contains(w)));
        let y: Vec<&str> = item.reference.iter().map(String::as_str).collect();
        let qs: Vec<&str> = q.tokens().iter().map(String::as_str).collect();
        assert_eq!(got, oracles::recall(&y, &qs, false));
        assert!(got > 0.0);
    }
}

#[test]
fn recall_is_macro_averaged_over_sentences() {
    let items = items_from(&["aa bb cc dd", "ee ff"], &["aa", "ee ff"]);
    let hyps = vec![
        vec!["aa".to_string(), "xx".to_string()],
        vec!["ee".to_string(), "ff".to_string(), "zz".to_string(), "yy".to_string()],
    ];
    let res = evaluate_hypotheses(hyps, &items, &[Metric::QueryRecall { matcher: Matcher::Exact }]).unwrap();
    assert_eq!(res.sentence_recall, vec![0.5, 0.5]);
    let mean = res.sentence_recall.iter().sum::<f64>() / 2.0;
    assert!((res.recall.unwrap() - mean).abs() < 1e-12);
}

#[test]
fn evaluation_errors() {
    let mut items = items_from(&["aa bb"], &["aa"]);
    assert!(matches!(
        evaluate_hypotheses(vec![], &items, &[Metric::CorpusBleu]),
        Err(Error::LengthMismatch { .. })
    ));
    assert!(evaluate_hypotheses(vec![], &[], &[Metric::CorpusBleu]).is_err());
    items[0].query = None;
    let hyp = vec![vec!["aa".to_string()]];
    assert!(evaluate_hypotheses(hyp.clone(), &items, &[Metric::QueryRecall { matcher: Matcher::Soft }]).is_err());
    assert!(evaluate_hypotheses(hyp, &items, &[Metric::CorpusBleu]).is_ok());
}

#[test]
fn pipeline_run_is_reproducible_and_recomputable() {
    let tmp = scratch("run");
    let dir = tmp.path().to_path_buf();
    let mut cfg = tiny();
    cfg.out_dir = Some(dir.clone());
    let first = run_experiment(&cfg).unwrap();

    // Second run reuses the cached baseline; a fresh directory retrains it.
    let again = run_experiment(&cfg).unwrap();
    let mut fresh_cfg = cfg.clone();
    let tmp2 = scratch("run2");
    fresh_cfg.out_dir = Some(tmp2.path().to_path_buf());
    let fresh = run_experiment(&fresh_cfg).unwrap();
    let in_memory = run_experiment(&ExperimentConfig { out_dir: None, ..cfg.clone() }).unwrap();
    for other in [&again, &fresh, &in_memory] {
        assert_eq!(
            serde_json::to_string(&other.without_timing()).unwrap(),
            serde_json::to_string(&first.without_timing()).unwrap()
        );
    }

    // A system trained for zero epochs is the baseline.
    let bl = first.system("BL").unwrap();
    let noop = first.system("NOOP").unwrap();
    assert_eq!(noop.bleu_mean.to_bits(), bl.bleu_mean.to_bits());
    assert_eq!(noop.recall_mean.to_bits(), bl.recall_mean.to_bits());

    // Every reported number comes back from the stored checkpoints.
    let pipe = Pipeline::new(cfg.clone()).unwrap();
    for name in ["MLE", "DC", "NOOP"] {
        let ckpt = dir.join("seed5").join(format!("{name}.ckpt"));
        let policy = load_policy(&ckpt, HashCheck::Require(&first.config_hash)).unwrap();
        let res = pipe.evaluate(&policy).unwrap();
        let seed = &first.system(name).unwrap().seeds[0];
        assert_eq!(res.bleu.unwrap().to_bits(), seed.bleu.to_bits());
        assert_eq!(res.recall.unwrap().to_bits(), seed.recall.to_bits());
        let stored: SentenceScores = serde_json::from_slice(
            &std::fs::read(dir.join("seed5").join(format!("{name}.scores.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(stored.bleu, res.sentence_bleu);
        assert_eq!(stored.recall, res.sentence_recall);
    }
    for f in ["report.json", "report.txt", "config.toml"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert!(dir.join("seed5/logs/sbleu.jsonl").exists());
    assert!(dir.join("seed5/estimator-sbleu.ckpt").exists());
    let table = first.to_table();
    assert!(table.contains("MLE vs BL"));
    assert!(table.contains(&first.config_hash[..12]));
}

#[test]
fn select_on_dev_never_ends_below_the_start() {
    let pipe = Pipeline::new(tiny()).unwrap();
    let report = pipe.run().unwrap();
    let dc = &report.system("DC").unwrap().seeds[0].curve;
    assert!(dc.selected_epoch <= 1);
    let bl = &report.system("BL").unwrap().seeds[0].curve;
    // Pretraining picks the best dev epoch; ties go to the earlier one.
    let best = bl.epochs.iter().map(|e| e.dev_bleu).fold(f64::MIN, f64::max);
    let first_best = bl.epochs.iter().find(|e| e.dev_bleu == best).unwrap().epoch;
    assert_eq!(bl.selected_epoch, first_best);
}
