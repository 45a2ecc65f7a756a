mod common;

use common::oracles::{counts, f1_from_counts, ndcg_exhaustive};
use lmft::metrics::{binary_f1, confusion, mean_f1, ndcg_at_k, ndcg_at_k_with, ndcg_single, EmptyGold};
use proptest::prelude::*;

fn labels(n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (prop::collection::vec(0usize..2, n), prop::collection::vec(0usize..2, n))
}

fn ranking_case() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1usize..=8).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
            prop::collection::btree_set(0..n, 1..=n).prop_map(|s| s.into_iter().collect()),
        )
    })
}

proptest! {
    #[test]
    fn f1_matches_direct_counting((preds, gold) in (1usize..60).prop_flat_map(labels)) {
        let (tp, fp, fn_) = counts(&preds, &gold, 1);
        let pos = f1_from_counts(tp, fp, fn_);
        prop_assert!((binary_f1(&preds, &gold, 1).unwrap() - pos).abs() < 1e-12);
        let (tp0, fp0, fn0) = counts(&preds, &gold, 0);
        let mean = (pos + f1_from_counts(tp0, fp0, fn0)) / 2.0;
        prop_assert!((mean_f1(&preds, &gold).unwrap() - mean).abs() < 1e-12);
        let c = confusion(&preds, &gold, 1).unwrap();
        prop_assert_eq!(c.total(), preds.len());
    }

    #[test]
    fn ndcg_matches_exhaustive_ideal((scores, gold) in ranking_case(), k in 1usize..6) {
        let got = ndcg_single(&scores, &gold, k).unwrap();
        prop_assert!((got - ndcg_exhaustive(&scores, &gold, k)).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
    }

    #[test]
    fn ndcg_ignores_monotone_rescaling((scores, gold) in ranking_case(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        prop_assert_eq!(ndcg_single(&scores, &gold, 5), ndcg_single(&moved, &gold, 5));
    }

    #[test]
    fn ideal_ranking_scores_one((_, gold) in ranking_case()) {
        let n = gold.iter().max().unwrap() + 3;
        let scores: Vec<f64> = (0..n).map(|i| if gold.contains(&i) { 1.0 } else { 0.0 }).collect();
        prop_assert_eq!(ndcg_single(&scores, &gold, 5), Some(1.0));
    }
}

#[test]
fn single_gold_at_rank_two() {
    let got = ndcg_single(&[0.2, 0.9, 0.1], &[0], 5).unwrap();
    assert!((got - 1.0 / 3f64.log2()).abs() < 1e-12);
}

#[test]
fn hand_computed_f1() {
    // tp 2, fp 1, fn 1
    let preds = [1, 1, 1, 0, 0];
    let gold = [1, 1, 0, 1, 0];
    assert!((binary_f1(&preds, &gold, 1).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    // class 0: tp 1, fp 1, fn 1
    assert!((mean_f1(&preds, &gold).unwrap() - (2.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
}

#[test]
fn empty_gold_policy() {
    let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
    let gold = vec![vec![0], vec![]];
    assert_eq!(ndcg_at_k(&scores, &gold, 5).unwrap(), 0.5);
    assert_eq!(ndcg_at_k_with(&scores, &gold, 5, EmptyGold::Skip).unwrap(), 1.0);
    assert!(ndcg_at_k(&scores, &gold, 0).is_err());
}
