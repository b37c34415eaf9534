use proptest::prelude::*;

use weakneg::attention::{
    attention_scores, classify, pool_representations, AttentionHead, HeadConfig, PoolMlp, CODEBOOK,
};
use weakneg::autodiff::{Graph, ParameterStore, Tensor};
use weakneg::losses::wn_loss;
use weakneg::negatives::{weak_negatives, SimilarityConfig};

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn peaked_logits_give_scalar_softmax_weights() {
    let mut g = Graph::new();
    let codebook = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]));
    let emb = g.constant(Tensor::matrix(3, 2, vec![10.0, 0.0, 0.0, 1.0, 0.0, -1.0]));
    let a = attention_scores(&mut g, codebook, emb, false).unwrap();
    let oracle = [
        1.0 / (1.0 + 2.0 * (-10.0f64).exp()),
        (-10.0f64).exp() / (1.0 + 2.0 * (-10.0f64).exp()),
    ];
    let row = g.value(a).row(0);
    assert!((row[0] - oracle[0]).abs() < 1e-12 && (row[0] - 0.999909).abs() < 1e-6);
    assert!((row[1] - oracle[1]).abs() < 1e-12 && (row[2] - 0.0000454).abs() < 1e-7);
}

#[test]
fn two_label_scores_match_scalar_softmax() {
    let mut g = Graph::new();
    let reps = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]));
    let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let (_, yhat) = classify(&mut g, reps, w);
    let y = g.value(yhat).data();
    assert!((y[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
    assert!((y[1] - 1.0 / (1.0 + (-3.0f64).exp())).abs() < 1e-12);
    assert!((y[0] - 0.8808).abs() < 1e-4 && (y[1] - 0.9526).abs() < 1e-4);
}

#[test]
fn one_patch_pools_to_that_patch() {
    let head = AttentionHead::new(HeadConfig::new(3, 4)).unwrap();
    let mut store = ParameterStore::new(2);
    head.init(&mut store).unwrap();
    let mut g = Graph::new();
    let e = g.constant(Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]));
    let out = head.forward(&mut g, &store, e).unwrap();
    for l in 0..3 {
        assert_eq!(g.value(out.pooled).row(l), &[0.3, -1.0, 2.0, 0.5]);
    }
}

#[test]
fn codebook_receives_gradient_from_the_loss() {
    let head = AttentionHead::new(HeadConfig {
        mlp_hidden: 8,
        ..HeadConfig::new(4, 6)
    })
    .unwrap();
    let mut store = ParameterStore::new(5);
    head.init(&mut store).unwrap();
    let mut g = Graph::new();
    let e = g.constant(Tensor::matrix(
        7,
        6,
        (0..42).map(|i| ((i * 13) % 19) as f64 / 9.0 - 1.0).collect(),
    ));
    let out = head.forward(&mut g, &store, e).unwrap();
    let z = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]);
    let (zt, _) = weak_negatives(&mut g, out.representations, &z, &SimilarityConfig::default()).unwrap();
    let loss = wn_loss(&mut g, &z, zt, out.predictions).unwrap();
    let grads = g.param_gradients(loss, &store).unwrap();
    assert!(grads[CODEBOOK].norm() > 0.0);
}

#[test]
fn residual_mlp_output_has_label_rows() {
    let mut store = ParameterStore::new(1);
    AttentionHead::new(HeadConfig::new(2, 3))
        .unwrap()
        .init(&mut store)
        .unwrap();
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![0.5, 0.5, 1.0, 0.0]));
    let e = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
    let mlp = PoolMlp::bind(&mut g, &store);
    let (pooled, reps) = pool_representations(&mut g, a, e, &mlp);
    assert_eq!(g.value(pooled).data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0]);
    assert_eq!(g.value(reps).shape(), &[2, 3]);
}

proptest! {
    #[test]
    fn attention_is_shift_invariant(
        logits in prop::collection::vec(-5.0f64..5.0, 6),
        c in -20.0f64..20.0,
    ) {
        // e_patch rows are one-hot plus a shared column, so logits_i = code_i + c.
        let m = logits.len();
        let mut code = logits.clone();
        code.push(c);
        let mut emb = vec![0.0; m * (m + 1)];
        for i in 0..m {
            emb[i * (m + 1) + i] = 1.0;
            emb[i * (m + 1) + m] = 1.0;
        }
        let mut g = Graph::new();
        let cb = g.constant(Tensor::matrix(1, m + 1, code));
        let e = g.constant(Tensor::matrix(m, m + 1, emb));
        let a = attention_scores(&mut g, cb, e, false).unwrap();
        let expected = softmax(&logits);
        for (got, want) in g.value(a).row(0).iter().zip(&expected) {
            prop_assert!((got - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn shared_classifier_partitions_representation_space(
        w in prop::collection::vec(-1.0f64..1.0, 12),
        e in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        // Replicating one representation across all labels: the winning label
        // under softmax is the one with the largest W_k·e, and it is unique.
        let mut g = Graph::new();
        let reps = g.constant(Tensor::matrix(4, 3, e.iter().cycle().take(12).cloned().collect()));
        let wv = g.constant(Tensor::matrix(4, 3, w.clone()));
        let (logits, _) = classify(&mut g, reps, wv);
        let row = g.value(logits).row(0).to_vec();
        let best = (0..4).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        let dots: Vec<f64> = (0..4).map(|k| (0..3).map(|j| w[k * 3 + j] * e[j]).sum()).collect();
        let oracle = (0..4).fold(0, |b, k| if dots[k] > dots[b] { k } else { b });
        prop_assert_eq!(best, oracle);
        prop_assert_eq!(row.iter().filter(|&&v| v == row[best]).count(), 1);
    }
}
