use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use weakneg::autodiff::Tensor;
use weakneg::metrics::{average_precision, mean_average_precision};

#[test]
fn ranking_examples() {
    assert_eq!(
        average_precision(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]).unwrap(),
        Some(1.0)
    );
    let ap = average_precision(&[0.9, 0.8, 0.7, 0.6, 0.5], &[0.0, 0.0, 0.0, 0.0, 1.0])
        .unwrap()
        .unwrap();
    assert!((ap - 0.2).abs() < 1e-15);
}

#[test]
fn scores_equal_to_truths_are_perfect() {
    let truths = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    let names = vec!["a".to_string(), "b".to_string()];
    assert_eq!(mean_average_precision(&truths, &truths, &names).unwrap().map, 1.0);
}

#[test]
fn single_label_map_is_its_ap() {
    let scores = Tensor::matrix(4, 1, vec![0.9, 0.8, 0.7, 0.6]);
    let truths = Tensor::matrix(4, 1, vec![1.0, 0.0, 1.0, 0.0]);
    let report = mean_average_precision(&scores, &truths, &["x".to_string()]).unwrap();
    assert_eq!(Some(report.map), report.per_label_ap[0]);
}

#[test]
fn random_scores_give_ap_near_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for prevalence in [0.2, 0.5] {
        let trials = 200;
        let n = 400;
        let mut sum = 0.0;
        for _ in 0..trials {
            let truths: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(prevalence))).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            sum += average_precision(&scores, &truths).unwrap().unwrap();
        }
        let mean = sum / trials as f64;
        assert!(
            (mean - prevalence).abs() < 0.03,
            "prevalence {prevalence}: mean AP {mean}"
        );
    }
}

proptest! {
    #[test]
    fn ap_is_invariant_under_monotone_transforms(
        scores in prop::collection::vec(-3.0f64..3.0, 12),
        truths in prop::collection::vec(prop::bool::ANY, 12),
    ) {
        let truths: Vec<f64> = truths.into_iter().map(f64::from).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 1.0).collect();
        let a = average_precision(&scores, &truths).unwrap();
        let b = average_precision(&transformed, &truths).unwrap();
        match (a, b) {
            (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-15),
            (x, y) => prop_assert_eq!(x, y),
        }
    }

    #[test]
    fn ap_lies_in_unit_interval(
        scores in prop::collection::vec(0.0f64..1.0, 20),
        truths in prop::collection::vec(prop::bool::ANY, 20),
    ) {
        let truths: Vec<f64> = truths.into_iter().map(f64::from).collect();
        if let Some(ap) = average_precision(&scores, &truths).unwrap() {
            let p = truths.iter().sum::<f64>() / truths.len() as f64;
            prop_assert!(ap <= 1.0 && ap > 0.0);
            // The worst ranking puts every positive last.
            let worst: f64 = {
                let pos = truths.iter().sum::<f64>() as usize;
                let n = truths.len();
                (1..=pos).map(|i| i as f64 / (n - pos + i) as f64).sum::<f64>() / pos as f64
            };
            prop_assert!(ap >= worst - 1e-12);
            prop_assert!(worst <= p + 1e-12);
        }
    }
}
