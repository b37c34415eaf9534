use proptest::prelude::*;

use weakneg::autodiff::{Graph, Tensor};
use weakneg::losses::{an_loss, bce_loss, ce_loss, epr_loss, reduce, wn_loss, Reduction};

fn value(f: impl FnOnce(&mut Graph, weakneg::autodiff::Var) -> weakneg::autodiff::Var, y: &[f64]) -> f64 {
    let mut g = Graph::new();
    let v = g.input(Tensor::vector(y.to_vec()));
    let out = f(&mut g, v);
    g.value(out).item()
}

fn binary(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::weighted(0.3), len).prop_map(|v| v.into_iter().map(f64::from).collect())
}

#[test]
fn perfect_predictions_cost_nothing() {
    let eps = 1e-12;
    let z = Tensor::vector(vec![1.0, 0.0]);
    assert!(value(|g, y| ce_loss(g, &z, y).unwrap(), &[1.0 - eps, 0.3]) < 1e-9);
    let zm = Tensor::vector(vec![0.0, 1.0]);
    assert!(value(|g, y| bce_loss(g, &z, &zm, y).unwrap(), &[1.0 - eps, eps]) < 1e-9);
}

#[test]
fn empty_support_costs_nothing() {
    let z = Tensor::zeros(&[3]);
    assert_eq!(value(|g, y| ce_loss(g, &z, y).unwrap(), &[0.2, 0.7, 0.4]), 0.0);
}

#[test]
fn zero_lambda_and_exact_count_reduce_to_ce() {
    let z = Tensor::vector(vec![0.0, 1.0, 0.0]);
    let y = [0.3, 0.6, 0.1];
    let ce = value(|g, v| ce_loss(g, &z, v).unwrap(), &y);
    assert_eq!(value(|g, v| an_loss(g, &z, v, 0.0).unwrap(), &y), ce);
    assert_eq!(value(|g, v| epr_loss(g, &z, v, 1.0, 1.0).unwrap(), &y), ce);
}

#[test]
fn batch_loss_is_the_exact_sum_of_image_losses() {
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..7)
        .map(|i| {
            let y: Vec<f64> = (0..5)
                .map(|l| 0.05 + 0.9 * (((i * 5 + l) * 37) % 97) as f64 / 97.0)
                .collect();
            let z: Vec<f64> = (0..5).map(|l| f64::from(l == i % 5)).collect();
            (y, z)
        })
        .collect();
    let mut g = Graph::new();
    let mut total = None;
    let mut sequential = 0.0;
    for (y, z) in &rows {
        let v = g.input(Tensor::vector(y.clone()));
        let li = an_loss(&mut g, &Tensor::vector(z.clone()), v, 1.0).unwrap();
        sequential += g.value(li).item();
        total = Some(match total {
            Some(acc) => g.add(acc, li),
            None => li,
        });
    }
    let root = reduce(&mut g, total.unwrap(), rows.len(), Reduction::Sum);
    assert_eq!(g.value(root).item().to_bits(), sequential.to_bits());
}

proptest! {
    #[test]
    fn losses_are_non_negative(
        y in prop::collection::vec(1e-9f64..1.0 - 1e-9, 6),
        zp in binary(6),
        zt in prop::collection::vec(0.0f64..1.0, 6),
        k in 0.5f64..4.0,
    ) {
        let z = Tensor::vector(zp.clone());
        let zm = Tensor::vector(zp.iter().map(|v| 1.0 - v).collect());
        let zt = Tensor::vector(zt);
        prop_assert!(value(|g, v| ce_loss(g, &z, v).unwrap(), &y) >= 0.0);
        prop_assert!(value(|g, v| bce_loss(g, &z, &zm, v).unwrap(), &y) >= 0.0);
        prop_assert!(value(|g, v| an_loss(g, &z, v, 1.0).unwrap(), &y) >= 0.0);
        prop_assert!(value(|g, v| epr_loss(g, &z, v, k, 1.0).unwrap(), &y) >= 0.0);
        let wn = value(|g, v| { let t = g.constant(zt.clone()); wn_loss(g, &z, t, v).unwrap() }, &y);
        prop_assert!(wn >= 0.0);
    }

    #[test]
    fn loss_gradients_match_central_differences(
        y in prop::collection::vec(0.05f64..0.95, 5),
        zp in binary(5),
        zt in prop::collection::vec(0.0f64..1.0, 5),
    ) {
        let z = Tensor::vector(zp.clone());
        let zm = Tensor::vector(zp.iter().map(|v| 1.0 - v).collect());
        let zt = Tensor::vector(zt);
        type Build<'a> = Box<dyn Fn(&mut Graph, weakneg::autodiff::Var) -> weakneg::autodiff::Var + 'a>;
        let builds: Vec<Build> = vec![
            Box::new(|g, v| ce_loss(g, &z, v).unwrap()),
            Box::new(|g, v| bce_loss(g, &z, &zm, v).unwrap()),
            Box::new(|g, v| an_loss(g, &z, v, 0.7).unwrap()),
            Box::new(|g, v| epr_loss(g, &z, v, 2.0, 1.0).unwrap()),
            Box::new(|g, v| { let t = g.constant(zt.clone()); wn_loss(g, &z, t, v).unwrap() }),
        ];
        let eps = 1e-6;
        for f in &builds {
            let mut g = Graph::new();
            let v = g.input(Tensor::vector(y.clone()));
            let root = f(&mut g, v);
            let grad = g.backward(root).unwrap().wrt(v).unwrap().clone();
            for e in 0..y.len() {
                let mut p = y.clone();
                p[e] += eps;
                let mut m = y.clone();
                m[e] -= eps;
                let numeric = (value(f, &p) - value(f, &m)) / (2.0 * eps);
                let a = grad.data()[e];
                prop_assert!((a - numeric).abs() <= 1e-6 * a.abs().max(numeric.abs()).max(1.0));
            }
        }
    }
}
