use proptest::prelude::*;

use weakneg::autodiff::{Graph, Init, ParameterStore, Tensor};

fn quadratic_and_softmax(g: &mut Graph, x: weakneg::autodiff::Var) -> (weakneg::autodiff::Var, weakneg::autodiff::Var) {
    let sq = g.mul(x, x);
    let l1 = g.sum(sq);
    let s = g.softmax_rows(x);
    let t = g.gelu(s);
    let l2 = g.mean(t);
    (l1, l2)
}

proptest! {
    #[test]
    fn backward_is_linear(
        data in prop::collection::vec(-2.0f64..2.0, 12),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let x0 = Tensor::matrix(3, 4, data);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let (l1, l2) = quadratic_and_softmax(&mut g, x);
            let root = match which {
                0 => l1,
                1 => l2,
                _ => {
                    let s1 = g.scale(l1, a);
                    let s2 = g.scale(l2, b);
                    g.add(s1, s2)
                }
            };
            g.backward(root).unwrap().wrt(x).unwrap().clone()
        };
        let (g1, g2, mixed) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..mixed.len() {
            let expected = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((mixed.data()[i] - expected).abs() <= 1e-10);
        }
    }
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    let build = |seed| {
        let mut s = ParameterStore::new(seed);
        s.init("a/weight", &[16, 8], Init::unit_variance(16)).unwrap();
        s.init("b/weight", &[3, 3, 4, 4], Init::unit_variance(36)).unwrap();
        s
    };
    let (x, y) = (build(9), build(9));
    for ((pa, ta), (pb, tb)) in x.iter().zip(y.iter()) {
        assert_eq!(pa, pb);
        assert!(ta.data().iter().zip(tb.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
    assert_ne!(build(10).get("a/weight"), x.get("a/weight"));
}

#[test]
fn three_layer_mlp_matches_central_differences() {
    let mut store = ParameterStore::new(3);
    let dims = [(5, 7), (7, 6), (6, 2)];
    for (i, &(a, b)) in dims.iter().enumerate() {
        store.init(&format!("l{i}/w"), &[a, b], Init::unit_variance(a)).unwrap();
        store.init(&format!("l{i}/b"), &[b], Init::Zeros).unwrap();
    }
    let x = Tensor::matrix(4, 5, (0..20).map(|v| (v as f64 * 0.61).cos()).collect());
    let loss = |s: &ParameterStore| {
        let mut g = Graph::new();
        let mut h = g.constant(x.clone());
        for i in 0..3 {
            let w = g.param(s, &format!("l{i}/w"));
            let b = g.param(s, &format!("l{i}/b"));
            let z = g.matmul(h, w);
            let z = g.add_row_broadcast(z, b);
            h = if i < 2 { g.gelu(z) } else { z };
        }
        let sq = g.mul(h, h);
        let root = g.sum(sq);
        (g.value(root).item(), g.param_gradients(root, s).unwrap())
    };
    let (_, grads) = loss(&store);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (path, grad) in &grads {
        for e in 0..grad.len() {
            let mut plus = store.clone();
            plus.get_mut(path).unwrap().data_mut()[e] += eps;
            let mut minus = store.clone();
            minus.get_mut(path).unwrap().data_mut()[e] -= eps;
            let numeric = (loss(&plus).0 - loss(&minus).0) / (2.0 * eps);
            let a = grad.data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}
