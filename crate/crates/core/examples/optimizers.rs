//! LAMB and AdamW fitting a small least-squares problem.

use weakneg::autodiff::{Graph, Init, ParameterStore, Tensor};
use weakneg::train::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind};

pub fn main() -> weakneg::Result<()> {
    let x = Tensor::matrix(6, 3, (0..18).map(|i| ((i * 5) % 7) as f64 / 3.0 - 1.0).collect());
    let target = Tensor::matrix(6, 1, vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0]);
    let schedule = LrSchedule(vec![(0, 0.05), (150, 0.01)]);

    for kind in [OptimizerKind::Lamb, OptimizerKind::Adamw] {
        let mut store = ParameterStore::new(2);
        store.init("w", &[3, 1], Init::unit_variance(3))?;
        let mut opt = Optimizer::new(OptimizerConfig {
            kind,
            ..Default::default()
        });
        let mut last = f64::NAN;
        for epoch in 0..200 {
            let mut g = Graph::new();
            let w = g.param(&store, "w");
            let xv = g.constant(x.clone());
            let t = g.constant(target.clone());
            let pred = g.matmul(xv, w);
            let r = g.sub(pred, t);
            let sq = g.mul(r, r);
            let loss = g.mean(sq);
            last = g.value(loss).item();
            let grads = g.param_gradients(loss, &store)?;
            opt.step(&mut store, &grads, schedule.lr_at(epoch))?;
        }
        println!("{kind:?}: loss after {} steps = {last:.6}", opt.steps_taken());
    }
    Ok(())
}
