//! Gradient and enumeration checks for every objective, shared by the
//! objective tests and the acceptance suite.

use bandit_nmt::objectives::*;
use bandit_nmt::policy::{AttentionKind, Policy, EOS, UNK};
use bandit_nmt::rewards::{sentence_bleu, Smoothing};
use diffcore::{grad_check, DiffError, Graph, Var};

use super::{full_space, tiny_policy};

pub const SOURCES: [&[usize]; 2] = [&[4, 5, 4], &[5, 5]];
pub const REFERENCES: [&[usize]; 2] = [&[5, 4], &[4]];
pub const LOGGED: [&[usize]; 2] = [&[4, 4], &[5, 4, 5]];
pub const REWARDS: [f64; 2] = [0.7, 0.2];

pub fn items() -> Vec<TrainItem<'static>> {
    (0..2)
        .map(|i| TrainItem {
            source: SOURCES[i],
            reference: Some(REFERENCES[i]),
            logged: Some(LOGGED[i]),
            reward: Some(REWARDS[i]),
            query: None,
        })
        .collect()
}

fn sample(tokens: &[usize], reward: f64, token_rewards: &[f64]) -> Sample {
    Sample { tokens: tokens.to_vec(), reward, token_rewards: token_rewards.to_vec() }
}

/// Fixed sample sets with word rewards whose products are non-zero.
pub fn frozen_samples() -> Vec<Vec<Sample>> {
    vec![
        vec![
            sample(&[5, 4, EOS], 0.9, &[1.0, 0.5, 1.0]),
            sample(&[4, EOS], 0.3, &[0.8, 1.0]),
            sample(&[UNK, 5, 5], 0.1, &[0.3, 1.0, 0.6]),
        ],
        vec![
            sample(&[4, EOS], 0.8, &[1.0, 1.0]),
            sample(&[5, 4, 4, EOS], 0.2, &[0.4, 0.9, 0.9, 1.0]),
        ],
    ]
}

pub fn gradient_policy() -> Policy {
    tiny_policy(AttentionKind::Additive, &["a", "b"], 5, 21)
}

fn diff<T>(r: bandit_nmt::Result<T>) -> diffcore::Result<T> {
    r.map_err(|e| DiffError::InvalidArgument(e.to_string()))
}

/// Worst relative gradient error per objective on a policy with at most 500
/// parameters, samples frozen.
pub fn objective_grad_errors() -> Vec<(&'static str, f64)> {
    let p = gradient_policy();
    assert!(p.params().num_scalars() <= 500);
    let items = items();
    let samples = frozen_samples();
    let alpha = 0.5;
    let eps = 1e-3;
    type Build<'b> = Box<dyn Fn(&mut Graph<'_>) -> diffcore::Result<Var> + 'b>;
    let builders: Vec<(&'static str, Build<'_>)> = vec![
        ("MLE", Box::new(|g| diff(mle_objective(g, &p, &items)))),
        ("MRT", Box::new(|g| diff(mrt_objective(g, &p, &items, &samples, alpha)))),
        ("W-MRT", Box::new(|g| diff(wmrt_objective(g, &p, &items, &samples, alpha, 0.0)))),
        (
            "MIX",
            Box::new(|g| {
                let m = diff(mle_objective(g, &p, &items))?;
                let r = diff(mrt_objective(g, &p, &items, &samples, alpha))?;
                diff(mix_objective(g, m, r, 0.5))
            }),
        ),
        ("EL", Box::new(|g| diff(el_surrogate(g, &p, &items, &samples)))),
        ("DPM", Box::new(|g| diff(dpm_objective(g, &p, &items, 0.3, true)))),
        ("DC", Box::new(|g| diff(dc_objective(g, &p, &items, &samples, (0.3, 0.4), true)))),
    ];
    builders
        .into_iter()
        .map(|(name, build)| {
            let report = grad_check(p.params(), eps, |g| build(g)).unwrap();
            (name, report.max_rel_error)
        })
        .collect()
}

/// Enumerable model: one regular target word, length cap 3.
pub fn enumerable_policy() -> Policy {
    tiny_policy(AttentionKind::Additive, &["a"], 3, 31)
}

pub const ENUM_SOURCE: &[usize] = &[4, 5];
pub const ENUM_REFERENCE: &[usize] = &[4, 4];

pub fn enum_reward(tokens: &[usize]) -> f64 {
    let content: Vec<usize> = tokens.iter().copied().filter(|&t| t != EOS).collect();
    sentence_bleu(&content, ENUM_REFERENCE, 4, Smoothing::AddOne)
}

/// Exact expected reward and the sample space with rewards attached.
pub fn enumeration(p: &Policy) -> (f64, Vec<Sample>) {
    let space = full_space(&[EOS, UNK, 4], EOS, 3);
    let mut expected = 0.0;
    let mut mass = 0.0;
    let mut samples = Vec::new();
    for y in space {
        let prob = p.log_prob(ENUM_SOURCE, &y).unwrap().total.exp();
        let r = enum_reward(&y);
        expected += prob * r;
        mass += prob;
        samples.push(Sample { tokens: y, reward: r, token_rewards: Vec::new() });
    }
    assert!((mass - 1.0).abs() < 1e-12, "sample space mass {mass}");
    (expected, samples)
}

pub struct EnumerationResult {
    pub expected: f64,
    pub mrt: f64,
    pub dc_sampled: f64,
    pub el_estimate: f64,
    pub el_standard_error: f64,
}

pub fn enumeration_checks(el_draws: usize) -> EnumerationResult {
    let p = enumerable_policy();
    let (expected, space) = enumeration(&p);
    let item = TrainItem {
        source: ENUM_SOURCE,
        reference: Some(ENUM_REFERENCE),
        logged: Some(ENUM_REFERENCE),
        reward: Some(0.0),
        query: None,
    };
    let items = [item];
    let (mrt, _) = gradient_of(&p, |g, p| mrt_objective(g, p, &items, std::slice::from_ref(&space), 1.0)).unwrap();
    let (dc, _) = gradient_of(&p, |g, p| dc_objective(g, p, &items, std::slice::from_ref(&space), (0.0, 0.0), false)).unwrap();
    let (dpm, _) = gradient_of(&p, |g, p| dpm_objective(g, p, &items, 0.0, false)).unwrap();

    let plan = SamplePlan {
        k: el_draws,
        reward: SampleReward::SentenceBleu { smoothing: Smoothing::AddOne },
        distinct: false,
        word_level: false,
    };
    let draws = draw_samples(&p, &item, &plan, 99, None).unwrap();
    let rewards: Vec<f64> = draws.iter().map(|s| s.reward).collect();
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    EnumerationResult {
        expected,
        mrt,
        dc_sampled: dc - dpm,
        el_estimate: mean,
        el_standard_error: (var / n).sqrt(),
    }
}
