//! Every loss on one prediction vector, with its gradient on an unobserved
//! label.

use weakneg::autodiff::{Graph, Tensor};
use weakneg::losses::{an_loss, bce_loss, ce_loss, epr_loss, wn_loss};

pub fn main() -> weakneg::Result<()> {
    let yhat = Tensor::vector(vec![0.8, 0.3, 0.1, 0.6]);
    let z_plus = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
    let z_minus = Tensor::vector(vec![0.0, 0.0, 1.0, 0.0]);
    let z_tilde = Tensor::vector(vec![0.0, 0.5, 0.0, 0.9]);

    type Build<'a> = Box<dyn Fn(&mut Graph, weakneg::autodiff::Var) -> weakneg::Result<weakneg::autodiff::Var> + 'a>;
    let losses: Vec<(&str, Build)> = vec![
        ("ce", Box::new(|g, y| ce_loss(g, &z_plus, y))),
        ("bce", Box::new(|g, y| bce_loss(g, &z_plus, &z_minus, y))),
        ("an", Box::new(|g, y| an_loss(g, &z_plus, y, 1.0))),
        ("epr", Box::new(|g, y| epr_loss(g, &z_plus, y, 2.0, 1.0))),
        (
            "wn",
            Box::new(|g, y| {
                let zt = g.constant(z_tilde.clone());
                wn_loss(g, &z_plus, zt, y)
            }),
        ),
    ];
    for (name, build) in &losses {
        let mut g = Graph::new();
        let y = g.input(yhat.clone());
        let loss = build(&mut g, y)?;
        let grads = g.backward(loss)?;
        let dy = grads.wrt(y).expect("input gradient");
        println!(
            "{name:<4} loss {:>8.5}  dL/dy = {:+.4?}",
            g.value(loss).item(),
            dy.data()
        );
    }
    Ok(())
}
