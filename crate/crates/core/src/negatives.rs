//! Weak negative estimation from self-similarity of per-label representations.
//!
//! For one image, `β_{l,k} = φ(cos(e_l, e_k), θ)` and every unobserved label
//! receives `z̃⁻_l = max_{k observed} β_{l,k}`. Observed labels get 0.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub theta: f64,
    /// Treat `z̃⁻` as a constant target when differentiating.
    pub detach_targets: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            theta: 0.0,
            detach_targets: true,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [-1, 1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// `(u·v) / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            context: "cosine_similarity",
            expected: vec![u.len()],
            actual: vec![v.len()],
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    let d: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

/// `φ(x, θ)`: `x` above the threshold, 0 otherwise.
pub fn thresholded_relu(x: f64, theta: f64) -> f64 {
    if x > theta {
        x
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeEstimate {
    pub z_tilde: Tensor,
    /// `|L|×|L|` gated similarities.
    pub beta: Tensor,
    /// Similarities that involved a zero-norm representation and were set to 0.
    pub degenerate: usize,
}

impl NegativeEstimate {
    /// `Σ_l z̃⁻_l`.
    pub fn mass(&self) -> f64 {
        self.z_tilde.sum()
    }
}

fn observed_indices(z_plus: &Tensor, labels: usize) -> Result<Vec<usize>> {
    if z_plus.shape() != [labels] {
        return Err(Error::Shape {
            context: "estimate_negatives observed positives",
            expected: vec![labels],
            actual: z_plus.shape().to_vec(),
        });
    }
    let obs: Vec<usize> = (0..labels).filter(|&l| z_plus.data()[l] == 1.0).collect();
    if obs.is_empty() {
        return Err(Error::Labels(
            "weak negative estimation needs at least one observed positive".into(),
        ));
    }
    Ok(obs)
}

/// Estimates weak negatives from an `|L|×F` representation matrix.
pub fn estimate_negatives(reps: &Tensor, z_plus: &Tensor, cfg: &SimilarityConfig) -> Result<NegativeEstimate> {
    if reps.rank() != 2 {
        return Err(Error::Shape {
            context: "estimate_negatives representations",
            expected: vec![z_plus.len(), 0],
            actual: reps.shape().to_vec(),
        });
    }
    let (l, _) = reps.dims2();
    let observed = observed_indices(z_plus, l)?;
    let mut beta = vec![0.0; l * l];
    let mut degenerate = 0;
    for i in 0..l {
        for j in i..l {
            let s = match cosine_similarity(reps.row(i), reps.row(j)) {
                Ok(s) => s,
                Err(Error::DegenerateVector) => {
                    degenerate += 1;
                    0.0
                }
                Err(e) => return Err(e),
            };
            let b = thresholded_relu(s, cfg.theta);
            beta[i * l + j] = b;
            beta[j * l + i] = b;
        }
    }
    let z_tilde: Vec<f64> = (0..l)
        .map(|i| {
            if z_plus.data()[i] == 1.0 {
                0.0
            } else {
                observed.iter().map(|&k| beta[i * l + k]).fold(0.0, f64::max)
            }
        })
        .collect();
    Ok(NegativeEstimate {
        z_tilde: Tensor::vector(z_tilde),
        beta: Tensor::matrix(l, l, beta),
        degenerate,
    })
}

/// Weak negatives as a graph node. Detached targets become a constant;
/// otherwise gradients flow back into `reps`.
pub fn weak_negatives(
    g: &mut Graph,
    reps: Var,
    z_plus: &Tensor,
    cfg: &SimilarityConfig,
) -> Result<(Var, NegativeEstimate)> {
    let est = estimate_negatives(g.value(reps), z_plus, cfg)?;
    if cfg.detach_targets {
        let v = g.constant(est.z_tilde.clone());
        return Ok((v, est));
    }
    let observed = observed_indices(z_plus, z_plus.len())?;
    let sims = g.cosine_rows(reps, reps);
    let cols = g.select_columns(sims, &observed);
    let gated = g.thresholded_relu(cols, cfg.theta);
    // With θ < 0 the gate can be negative; the tensor path floors the max at 0.
    let gated = g.relu(gated);
    let best = g.max_rows(gated);
    let mask = g.constant(z_plus.map(|v| 1.0 - v));
    Ok((g.mul(best, mask), est))
}
