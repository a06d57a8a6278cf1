mod common;

use bandit_nmt::policy::{AttentionKind, Policy, BOS, EOS, UNK};
use common::{finished_sequences, tiny_policy};
use diffcore::{grad_check, DiffError, Graph, Tensor};
use proptest::prelude::*;

fn row_times(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = w.dims2().unwrap();
    assert_eq!(x.len(), r);
    (0..c)
        .map(|j| (0..r).map(|i| x[i] * w.at(i, j)).sum())
        .collect()
}

fn plus(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigm(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gru(p: &Policy, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let ps = p.params();
    let w = ps.by_name(&format!("{prefix}.w")).unwrap();
    let u = ps.by_name(&format!("{prefix}.u")).unwrap();
    let b = ps.by_name(&format!("{prefix}.b")).unwrap();
    let n_h = h.len();
    let gx = plus(&row_times(x, w), b.data());
    let hu = row_times(h, u);
    (0..n_h)
        .map(|i| {
            let z = sigm(gx[i] + hu[i]);
            let r = sigm(gx[n_h + i] + hu[n_h + i]);
            let n = (gx[2 * n_h + i] + r * hu[2 * n_h + i]).tanh();
            (1.0 - z) * n + z * h[i]
        })
        .collect()
}

/// Independent step-by-step forward pass with additive attention.
fn oracle_log_prob(p: &Policy, x: &[usize], y: &[usize]) -> Vec<f64> {
    let ps = p.params();
    let h_size = p.config().hidden_size;
    let src = ps.by_name("src_embed").unwrap();
    let trg = ps.by_name("trg_embed").unwrap();
    let emb: Vec<Vec<f64>> = x.iter().map(|&t| src.row_slice(t).to_vec()).collect();

    let mut fwd = vec![vec![0.0; h_size]; x.len()];
    let mut h = vec![0.0; h_size];
    for t in 0..x.len() {
        h = gru(p, "enc_fwd", &emb[t], &h);
        fwd[t] = h.clone();
    }
    let mut bwd = vec![vec![0.0; h_size]; x.len()];
    let mut h = vec![0.0; h_size];
    for t in (0..x.len()).rev() {
        h = gru(p, "enc_bwd", &emb[t], &h);
        bwd[t] = h.clone();
    }
    let ann: Vec<Vec<f64>> = fwd.iter().zip(&bwd).map(|(f, b)| [f.clone(), b.clone()].concat()).collect();

    let mut s: Vec<f64> = plus(&row_times(&bwd[0], ps.by_name("init.w").unwrap()), ps.by_name("init.b").unwrap().data())
        .into_iter()
        .map(f64::tanh)
        .collect();
    let mut prev = BOS;
    let mut out = Vec::new();
    for &tok in y {
        let q = row_times(&s, ps.by_name("att.w_dec").unwrap());
        let scores: Vec<f64> = ann
            .iter()
            .map(|a| {
                let k = row_times(a, ps.by_name("att.w_enc").unwrap());
                let e: Vec<f64> = k.iter().zip(&q).map(|(k, q)| (k + q).tanh()).collect();
                row_times(&e, ps.by_name("att.v").unwrap())[0]
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|e| (e - m).exp()).sum();
        let att: Vec<f64> = scores.iter().map(|e| (e - m).exp() / z).collect();
        let mut ctx = vec![0.0; 2 * h_size];
        for (a, w) in ann.iter().zip(&att) {
            for i in 0..ctx.len() {
                ctx[i] += w * a[i];
            }
        }
        let input = [trg.row_slice(prev).to_vec(), ctx.clone()].concat();
        s = gru(p, "dec", &input, &s);
        let feat = [s.clone(), ctx].concat();
        let logits = plus(&row_times(&feat, ps.by_name("out.w").unwrap()), ps.by_name("out.b").unwrap().data());
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        out.push(logits[p.output_index(tok).unwrap()] - lse);
        prev = tok;
    }
    out
}

#[test]
fn uniform_logits_give_log_one_over_v() {
    let mut p = tiny_policy(AttentionKind::Additive, &["a", "b", "c"], 5, 1);
    for name in ["out.w", "out.b"] {
        let id = p.params().id(name).unwrap();
        p.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let y = [p.trg_vocab().id("b")];
    let s = p.log_prob(&[4, 5], &y).unwrap();
    let v = p.num_outputs() as f64;
    assert!((s.total - (1.0 / v).ln()).abs() < 1e-12);
}

#[test]
fn total_is_sum_of_per_token_values() {
    let p = tiny_policy(AttentionKind::Additive, &["a", "b"], 5, 2);
    let s = p.log_prob(&[4, 5, 4], &[4, 5, UNK, EOS]).unwrap();
    let sum: f64 = s.per_token.iter().sum();
    assert!((s.total - sum).abs() < 1e-9);
    assert!(s.total <= 0.0);
    assert!(s.finished);
}

#[test]
fn matches_step_by_step_oracle() {
    for seed in 0..5 {
        let p = tiny_policy(AttentionKind::Additive, &["a", "b", "c"], 6, seed);
        let x = [4, 5, 5, 4];
        let y = [6, 4, 5, EOS];
        let s = p.log_prob(&x, &y).unwrap();
        let oracle = oracle_log_prob(&p, &x, &y);
        for (a, b) in s.per_token.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let prod: f64 = oracle.iter().map(|l| l.exp()).product();
        assert!((s.total.exp() - prod).abs() < 1e-12);
    }
}

#[test]
fn per_step_distributions_sum_to_one() {
    for attention in [AttentionKind::Additive, AttentionKind::Multiplicative] {
        let p = tiny_policy(attention, &["a", "b", "c"], 6, 3);
        let mut g = Graph::new(p.params());
        let enc = p.encode(&mut g, &[4, 5], None).unwrap();
        let mut state = enc.init_state;
        for prev in [BOS, 4, 5, 6] {
            let (logp, s) = p.step(&mut g, &enc, state, prev, None).unwrap();
            let total: f64 = g.value(logp).data().iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
            state = s;
        }
    }
}

#[test]
fn errors_on_bad_input() {
    let p = tiny_policy(AttentionKind::Additive, &["a"], 5, 0);
    assert!(p.log_prob(&[], &[EOS]).is_err());
    assert!(p.log_prob(&[4], &[]).is_err());
    assert!(p.log_prob(&[99], &[EOS]).is_err());
    assert!(p.log_prob(&[4], &[42]).is_err());
    assert!(p.log_prob(&[4], &[BOS]).is_err());
}

#[test]
fn log_prob_gradient_passes_grad_check() {
    for attention in [AttentionKind::Additive, AttentionKind::Multiplicative] {
        let p = tiny_policy(attention, &["a", "b"], 5, 11);
        assert!(p.params().num_scalars() <= 500);
        let report = grad_check(p.params(), 1e-4, |g| {
            let s = p
                .score(g, &[4, 5, 4], &[5, 4, EOS], None)
                .map_err(|e| DiffError::InvalidArgument(e.to_string()))?;
            Ok(s.total)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{attention:?}: {report:?}");
    }
}

#[test]
fn point_mass_policy_samples_identically() {
    let mut p = tiny_policy(AttentionKind::Additive, &["a", "b"], 4, 5);
    let w = p.params().id("out.w").unwrap();
    p.params_mut().get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let b = p.params().id("out.b").unwrap();
    let idx = p.output_index(EOS).unwrap();
    let bias = p.params_mut().get_mut(b).data_mut();
    bias.iter_mut().for_each(|v| *v = -50.0);
    bias[idx] = 50.0;
    let samples = p.sample(&[4], 20, 9).unwrap();
    assert!(samples.iter().all(|s| s.tokens == vec![EOS]));
}

#[test]
fn sampling_is_reproducible() {
    let p = tiny_policy(AttentionKind::Additive, &["a", "b"], 6, 4);
    let a = p.sample(&[4, 5], 10, 77).unwrap();
    let b = p.sample(&[4, 5], 10, 77).unwrap();
    assert_eq!(a, b);
    for s in &a {
        let rescored = p.log_prob(&[4, 5], &s.tokens).unwrap();
        assert!((rescored.total - s.total).abs() < 1e-9);
        assert!(s.finished || s.tokens.len() == 6);
    }
    assert!(p.sample(&[4], 0, 1).is_err());
}

#[test]
fn sample_frequency_matches_exact_probability() {
    let p = tiny_policy(AttentionKind::Additive, &["a"], 2, 8);
    let target = vec![4, EOS];
    let prob = p.log_prob(&[4, 5], &target).unwrap().total.exp();
    let n = 10_000;
    let hits = p
        .sample(&[4, 5], n, 2024)
        .unwrap()
        .iter()
        .filter(|s| s.tokens == target)
        .count();
    let freq = hits as f64 / n as f64;
    let se = (prob * (1.0 - prob) / n as f64).sqrt();
    assert!((freq - prob).abs() <= 3.0 * se, "freq {freq} prob {prob} se {se}");
}

#[test]
fn beam_one_is_greedy() {
    for seed in 0..5 {
        let p = tiny_policy(AttentionKind::Additive, &["a", "b", "c"], 8, seed);
        let g = p.greedy(&[4, 5]).unwrap();
        let b = p.beam_decode(&[4, 5], 1, false).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert!((g.total - b.total).abs() < 1e-12);
    }
}

#[test]
fn full_beam_equals_exhaustive_argmax() {
    for seed in 0..8 {
        let p = tiny_policy(AttentionKind::Additive, &["a"], 3, seed);
        let x = [4, 5];
        // output classes: end-of-sequence, unknown, "a"
        let outputs = [EOS, UNK, 4];
        let all = finished_sequences(&outputs, EOS, 3);
        for normalize in [false, true] {
            let best = all
                .iter()
                .map(|y| {
                    let s = p.log_prob(&x, y).unwrap();
                    (s.score(normalize), y.clone())
                })
                .fold(None::<(f64, Vec<usize>)>, |acc, c| match acc {
                    Some(a) if a.0 > c.0 || (a.0 == c.0 && a.1 <= c.1) => Some(a),
                    _ => Some(c),
                })
                .unwrap();
            let beam = p.beam_decode(&x, 27, normalize).unwrap();
            assert!(beam.finished);
            assert_eq!(beam.tokens, best.1, "seed {seed} normalize {normalize}");
        }
    }
}

#[test]
fn beam_decode_is_deterministic() {
    let p = tiny_policy(AttentionKind::Multiplicative, &["a", "b"], 6, 6);
    assert_eq!(p.beam_decode(&[4, 5], 3, true).unwrap(), p.beam_decode(&[4, 5], 3, true).unwrap());
    assert!(p.beam_decode(&[4], 0, true).is_err());
}

#[test]
fn unfinished_hypothesis_is_flagged() {
    let mut p = tiny_policy(AttentionKind::Additive, &["a"], 3, 1);
    let b = p.params().id("out.b").unwrap();
    let idx = p.output_index(EOS).unwrap();
    p.params_mut().get_mut(b).data_mut()[idx] = -1e3;
    let s = p.beam_decode(&[4], 2, false).unwrap();
    assert!(!s.finished);
    assert_eq!(s.tokens.len(), 3);
}

#[test]
fn length_normalized_prob_is_geometric_mean() {
    let p = tiny_policy(AttentionKind::Additive, &["a", "b"], 6, 3);
    let y = [4, 5, EOS];
    let s = p.log_prob(&[4], &y).unwrap();
    let pn = p.length_normalized_prob(&[4], &y).unwrap();
    assert!(pn > 0.0 && pn <= 1.0);
    assert!((pn.powi(3) - s.total.exp()).abs() < 1e-9);
    let geo = s.per_token.iter().map(|l| l.exp()).product::<f64>().powf(1.0 / 3.0);
    assert!((pn - geo).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn wider_beams_never_score_lower(seed in 0u64..1000, normalize in any::<bool>(), len in 1usize..4) {
        let p = tiny_policy(AttentionKind::Additive, &["a", "b"], 5, seed);
        let x: Vec<usize> = (0..len).map(|i| 4 + (i + seed as usize) % 2).collect();
        let mut last: Option<(bool, f64)> = None;
        for b in 1..=4 {
            let s = p.beam_decode(&x, b, normalize).unwrap();
            let score = s.score(normalize);
            if let Some((finished, prev)) = last {
                // a finished hypothesis always outranks an unfinished one
                prop_assert!(s.finished || !finished);
                if s.finished == finished {
                    prop_assert!(score >= prev);
                }
            }
            last = Some((s.finished, score));
        }
    }
}
