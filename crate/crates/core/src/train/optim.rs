//! Step learning-rate schedule and the two optimizers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Piecewise-constant learning rate: `(first_epoch, lr)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl Default for LrSchedule {
    fn default() -> Self {
        Self(vec![(0, 1e-3), (5, 5e-4), (10, 2.5e-4), (15, 1.25e-4)])
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self(vec![(0, lr)])
    }

    pub fn validate(&self) -> Result<()> {
        let steps = &self.0;
        if steps.first().map(|s| s.0) != Some(0) {
            return Err(Error::Config("lr_schedule must start at epoch 0".into()));
        }
        for w in steps.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("lr_schedule epochs must increase".into()));
            }
            if w[1].1 > w[0].1 {
                return Err(Error::Config("lr_schedule rates must not increase".into()));
            }
        }
        if steps.iter().any(|s| s.1.is_nan() || s.1 <= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.0
            .iter()
            .take_while(|s| s.0 <= epoch)
            .last()
            .map_or(self.0[0].1, |s| s.1)
    }

    /// Epochs (after 0) at which the rate changes.
    pub fn boundaries(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().skip(1).map(|s| s.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam direction rescaled per parameter tensor by `‖p‖ / ‖u‖`.
    #[default]
    Lamb,
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Lamb,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 1e-4,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimizer state over a [`ParameterStore`].
///
/// Weight decay shrinks parameters by `1 − lr·decay` every step,
/// independently of the gradient.
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let shrink = 1.0 - lr * c.weight_decay;
        for (path, p) in store.iter_mut() {
            let g = grads
                .get(path)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{path}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    context: "optimizer gradient",
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            let st = self.state.entry(path.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            let mut update = Vec::with_capacity(p.len());
            for ((m, v), &gi) in st.m.iter_mut().zip(st.v.iter_mut()).zip(g.data()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                update.push((*m / bc1) / ((*v / bc2).sqrt() + c.eps));
            }
            let trust = match c.kind {
                OptimizerKind::Adamw => 1.0,
                OptimizerKind::Lamb => {
                    let pn = p.norm();
                    let un = update.iter().map(|u| u * u).sum::<f64>().sqrt();
                    if pn > 0.0 && un > 0.0 {
                        pn / un
                    } else {
                        1.0
                    }
                }
            };
            for (pi, u) in p.data_mut().iter_mut().zip(&update) {
                *pi = *pi * shrink - lr * trust * u;
            }
        }
        Ok(())
    }
}
