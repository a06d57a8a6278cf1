mod common;

use bandit_nmt::policy::{Vocabulary, EOS};
use bandit_nmt::rewards::*;
use proptest::prelude::*;

fn q(words: &[&str]) -> Query {
    Query::new(words).unwrap()
}

#[test]
fn word_match_examples() {
    assert!(word_match("lock", &q(&["bicycle", "lock"])));
    assert!(!word_match("red", &q(&["bicycle", "lock"])));
    assert!(!word_match("cerradura", &q(&["candado", "bicicleta"])));
    assert!(word_match("LOCK", &q(&["lock"])));
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance("abc", "abc"), 0);
    assert_eq!(edit_distance("abc", ""), 3);
    assert_eq!(edit_distance("kitten", "sitting"), 3);
    assert_eq!(edit_distance("kitten", "sitting"), common::oracles::edit_distance("kitten", "sitting"));
}

#[test]
fn soft_match_examples() {
    assert!(soft_match("candado", &q(&["candado"])));
    assert!(soft_match("candados", &q(&["candado"])));
    assert_eq!(edit_distance("bicicleta", "bici"), 5);
    assert!(!soft_match("bicicleta", &q(&["bici"])));
}

#[test]
fn recall_examples() {
    assert_eq!(recall(&["bicycle", "lock"], &q(&["bicycle", "lock"]), Matcher::Exact).unwrap(), 1.0);
    assert_eq!(
        recall(&["new", "lock", "red", "case"], &q(&["bicycle", "lock"]), Matcher::Exact).unwrap(),
        0.25
    );
    assert!(recall::<&str>(&[], &q(&["x"]), Matcher::Exact).is_err());
    assert!(Query::new(Vec::<String>::new()).is_err());
}

/// The clicked-title example: two of sixteen title words match the query
/// under per-title-token recall, and one of the two query words is found in
/// the title.
#[test]
fn clicked_title_example() {
    let query = q(&["candado", "bicicleta"]);
    let title: Vec<&str> = "Nuevo código de vibración Bicicleta Ciclomotor alarma de seguridad de bloqueo Bicicleta Ciclismo Cerradura De Sonido"
        .split_whitespace()
        .collect();
    assert_eq!(title.len(), 16);
    assert_eq!(recall(&title, &query, Matcher::Exact).unwrap(), 0.125);
    let as_query = Query::new(&title).unwrap();
    assert_eq!(recall(&["candado", "bicicleta"], &as_query, Matcher::Exact).unwrap(), 0.5);
}

#[test]
fn sentence_bleu_examples() {
    let r = [1, 2, 3, 4, 5];
    assert_eq!(sentence_bleu(&r, &r, 4, Smoothing::AddOne), 1.0);
    // no shared unigrams: unigram precision 0 gives the floor
    let h = [6, 7, 8, 9, 10];
    assert_eq!(sentence_bleu(&h, &r, 4, Smoothing::AddOne), common::oracles::sentence_bleu(&h, &r));
    assert_eq!(sentence_bleu(&h, &r, 4, Smoothing::AddOne), 0.0);
    assert_eq!(sentence_bleu::<u8>(&[], &[1], 4, Smoothing::AddOne), 0.0);
    // unsmoothed: no bigram match zeroes the score, smoothed does not
    let h2 = [1, 3, 5];
    assert_eq!(sentence_bleu(&h2, &r, 4, Smoothing::None), 0.0);
    assert!(sentence_bleu(&h2, &r, 4, Smoothing::AddOne) > 0.0);
}

#[test]
fn corpus_bleu_examples() {
    let refs = vec![vec!["a", "b", "c", "d", "e"], vec!["x", "y", "z", "w"]];
    assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
    assert_eq!(corpus_bleu(&[vec!["p", "q"]], &[vec!["r", "s"]]).unwrap(), 0.0);
    assert!(corpus_bleu(&refs[..1], &refs).is_err());
}

#[test]
fn all_scores_agree_with_oracles() {
    assert_eq!(common::oracles::metric_disagreements(1000, 7), 0);
}

#[test]
fn reward_spec_scores() {
    let v = Vocabulary::new(["candado", "bici", "rojo"]).unwrap();
    let query = q(&["candado", "bicicleta"]);
    let hyp = v.encode("candado rojo");
    let mut with_eos = hyp.clone();
    with_eos.push(EOS);
    let spec = RewardSpec::Recall { query: &query, matcher: Matcher::Exact };
    assert_eq!(spec.score(&with_eos, &v).unwrap(), 0.5);
    assert_eq!(spec.token_rewards(&with_eos, &v).unwrap(), vec![1.0, 0.0, 1.0]);
    assert_eq!(spec.score(&[EOS], &v).unwrap(), 0.0);

    let reference = v.encode("candado rojo");
    let bleu = RewardSpec::SentenceBleu { reference: &reference, smoothing: Smoothing::AddOne };
    assert_eq!(bleu.score(&with_eos, &v).unwrap(), 1.0);
    assert!(bleu.token_rewards(&hyp, &v).is_err());
    assert!(!RewardSpec::DirectLogged(0.3).can_score_samples());
    assert_eq!(rescale_stars(5.0), 1.0);
    assert_eq!(rescale_stars(1.0), 0.0);
}

proptest! {
    #[test]
    fn bleu_is_label_invariant(h in prop::collection::vec(0usize..5, 1..10), r in prop::collection::vec(0usize..5, 1..10), shift in 1usize..100) {
        let h2: Vec<usize> = h.iter().map(|t| (t * 7 + shift) % 1000).collect();
        let r2: Vec<usize> = r.iter().map(|t| (t * 7 + shift) % 1000).collect();
        let a = sentence_bleu(&h, &r, 4, Smoothing::AddOne);
        prop_assert_eq!(a, sentence_bleu(&h2, &r2, 4, Smoothing::AddOne));
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn soft_recall_dominates_exact(y in prop::collection::vec("[a-d]{1,6}", 1..6), qw in prop::collection::vec("[a-d]{1,6}", 1..4)) {
        let query = Query::new(&qw).unwrap();
        let exact = recall(&y, &query, Matcher::Exact).unwrap();
        let soft = recall(&y, &query, Matcher::Soft).unwrap();
        prop_assert!(exact <= soft);
        for w in &y {
            prop_assert!(!word_match(w, &query) || soft_match(w, &query));
        }
        let mut rev = qw.clone();
        rev.reverse();
        prop_assert_eq!(exact, recall(&y, &Query::new(&rev).unwrap(), Matcher::Exact).unwrap());
    }
}
