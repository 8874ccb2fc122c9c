//! Trapezoidal ROC AUC against the all-pairs Mann-Whitney oracle.

use ecgcbam::eval::roc_auc;
use ecgcbam_oracles::auc_pairwise;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[test]
fn trapezoid_equals_pairwise_on_random_instances() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    for case in 0..100 {
        let n = rng.gen_range(2..400);
        // A third of the cases quantize scores hard, producing heavy ties.
        let levels = match case % 3 {
            0 => rng.gen_range(2..6),
            1 => rng.gen_range(6..20),
            _ => usize::MAX,
        };
        let mut scores: Vec<f64> = Vec::with_capacity(n);
        let mut labels: Vec<u8> = Vec::with_capacity(n);
        for _ in 0..n {
            let s: f64 = rng.gen();
            let s = if levels == usize::MAX {
                s
            } else {
                (s * levels as f64).floor() / levels as f64
            };
            scores.push(s);
            labels.push(rng.gen_bool(0.5) as u8);
        }
        // Force both classes to exist.
        labels[0] = 1;
        if n > 1 {
            labels[1] = 0;
        } else {
            continue;
        }

        let (_, trapezoid) = roc_auc(&scores, &labels).unwrap();
        let pairwise = auc_pairwise(&scores, &labels);
        assert!(
            (trapezoid - pairwise).abs() < 1e-12,
            "case {case} (n={n}): trapezoid {trapezoid} vs pairwise {pairwise}"
        );
    }
}

#[test]
fn all_scores_identical_is_half() {
    let scores = vec![0.42; 37];
    let labels: Vec<u8> = (0..37).map(|i| (i % 2) as u8).collect();
    let (_, auc) = roc_auc(&scores, &labels).unwrap();
    assert!((auc - 0.5).abs() < 1e-15);
    assert!((auc_pairwise(&scores, &labels) - 0.5).abs() < 1e-15);
}

#[test]
fn inverted_ranking_gives_zero() {
    let scores = [0.1, 0.2, 0.8, 0.9];
    let labels = [1u8, 1, 0, 0];
    let (_, auc) = roc_auc(&scores, &labels).unwrap();
    assert_eq!(auc, 0.0);
    assert_eq!(auc_pairwise(&scores, &labels), 0.0);
}
