//! A three-layer MLP on the tape: gradients, a finite-difference spot check
//! and a checkpoint round trip.

use weakneg::autodiff::{checkpoint, evaluate_with_gradients, Graph, Init, ParameterStore, Tensor};

fn loss(g: &mut Graph, store: &ParameterStore, x: &Tensor) -> weakneg::autodiff::Var {
    let mut h = g.constant(x.clone());
    for layer in 0..3 {
        let w = g.param(store, &format!("mlp/layer{layer}/weight"));
        let b = g.param(store, &format!("mlp/layer{layer}/bias"));
        let z = g.matmul(h, w);
        let z = g.add_row_broadcast(z, b);
        h = if layer < 2 { g.gelu(z) } else { z };
    }
    let sq = g.mul(h, h);
    g.mean(sq)
}

pub fn main() -> weakneg::Result<()> {
    let mut store = ParameterStore::new(7);
    for (layer, (i, o)) in [(4, 8), (8, 8), (8, 2)].into_iter().enumerate() {
        store.init(&format!("mlp/layer{layer}/weight"), &[i, o], Init::unit_variance(i))?;
        store.init(&format!("mlp/layer{layer}/bias"), &[o], Init::Zeros)?;
    }
    let x = Tensor::matrix(3, 4, (0..12).map(|v| (v as f64 * 0.37).sin()).collect());

    let mut g = Graph::new();
    let root = loss(&mut g, &store, &x);
    println!("loss = {:.6}", g.value(root).item());
    let grads = evaluate_with_gradients(&g, root, &store)?;
    for (path, grad) in &grads {
        println!("{path:<20} |grad| = {:.4e}", grad.norm());
    }

    let path = "mlp/layer1/weight";
    let eps = 1e-5;
    let probe = |delta: f64| {
        let mut s = store.clone();
        s.get_mut(path).expect("parameter exists").data_mut()[5] += delta;
        let mut g = Graph::new();
        let r = loss(&mut g, &s, &x);
        g.value(r).item()
    };
    let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
    println!(
        "{path}[5]: analytic {:.8e}, central difference {numeric:.8e}",
        grads[path].data()[5]
    );

    let dir = std::env::temp_dir().join("weakneg_autodiff_mlp");
    checkpoint::save(&dir, &store, serde_json::json!({"example": "mlp"}))?;
    let (back, manifest) = checkpoint::load(&dir)?;
    println!(
        "checkpoint: {} tensors, dtype {}, identical = {}",
        manifest.params.len(),
        manifest.dtype,
        back == store
    );
    Ok(())
}
