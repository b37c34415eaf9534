//! Label-wise attention over patch embeddings, pooled representations and
//! per-label scores.

use weakneg::attention::{AttentionHead, HeadConfig};
use weakneg::autodiff::{Graph, ParameterStore, Tensor};

pub fn main() -> weakneg::Result<()> {
    let (labels, m, f) = (3, 5, 8);
    let head = AttentionHead::new(HeadConfig {
        mlp_hidden: 16,
        ..HeadConfig::new(labels, f)
    })?;
    let mut store = ParameterStore::new(11);
    head.init(&mut store)?;

    let patches = Tensor::matrix(m, f, (0..m * f).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect());
    let mut g = Graph::new();
    let e = g.constant(patches);
    let out = head.forward(&mut g, &store, e)?;

    let a = g.value(out.attention);
    for l in 0..labels {
        let row = a.row(l);
        println!("label {l}: alpha = {:.3?} (sum {:.12})", row, row.iter().sum::<f64>());
    }
    println!("representations {:?}", g.value(out.representations).shape());
    println!("scores {:.4?}", g.value(out.predictions).data());
    Ok(())
}
