//! Multi-label losses for full and single-positive supervision.
//!
//! All losses are sums over labels and over images (rows). Log arguments are
//! clamped to `[LOG_EPS, 1 − LOG_EPS]`. Each per-image term is formed before
//! the batch sum, so the loss of a batch equals the sequential sum of the
//! per-image losses exactly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Binary cross entropy on observed positives and negatives.
    Bce,
    /// Cross entropy on observed positives only.
    Ce,
    /// Every unobserved label treated as a negative, weighted by λ.
    An,
    /// Positives plus a penalty pulling `Σ ŷ` towards the expected label count.
    Epr,
    /// Positives plus weak negatives estimated from representation similarity.
    Wn,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Bce, LossKind::Ce, LossKind::An, LossKind::Epr, LossKind::Wn];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Ce => "ce",
            LossKind::An => "an",
            LossKind::Epr => "epr",
            LossKind::Wn => "wn",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}` (expected one of bce, ce, an, epr, wn)")))
    }
}

/// How per-image losses combine over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// What a label vector holds; fixes the admissible value range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    GroundTruth,
    ObservedPositive,
    ObservedNegative,
    WeakNegative,
    Prediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector {
    kind: LabelKind,
    values: Vec<f64>,
}

impl LabelVector {
    pub fn new(kind: LabelKind, values: Vec<f64>) -> Result<Self> {
        let ok = |v: f64| match kind {
            LabelKind::GroundTruth | LabelKind::ObservedPositive | LabelKind::ObservedNegative => v == 0.0 || v == 1.0,
            LabelKind::WeakNegative => (0.0..=1.0).contains(&v),
            LabelKind::Prediction => v > 0.0 && v < 1.0,
        };
        if let Some(bad) = values.iter().find(|&&v| !ok(v)) {
            return Err(Error::Labels(format!("value {bad} out of range for {kind:?}")));
        }
        Ok(Self { kind, values })
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }
}

/// Fails when some label is both an observed positive and an observed negative.
pub fn check_compatible(z_plus: &Tensor, z_minus: &Tensor) -> Result<()> {
    if z_plus.shape() != z_minus.shape() {
        return Err(Error::Shape {
            context: "observed positives vs negatives",
            expected: z_plus.shape().to_vec(),
            actual: z_minus.shape().to_vec(),
        });
    }
    if let Some(i) = z_plus
        .data()
        .iter()
        .zip(z_minus.data())
        .position(|(&p, &n)| p == 1.0 && n == 1.0)
    {
        return Err(Error::Labels(format!(
            "label {i} is both an observed positive and an observed negative"
        )));
    }
    Ok(())
}

fn check_shape(g: &Graph, yhat: Var, labels: &[usize], context: &'static str) -> Result<()> {
    let ys = g.shape(yhat);
    if ys != labels || !(ys.len() == 1 || ys.len() == 2) {
        return Err(Error::Shape {
            context,
            expected: ys.to_vec(),
            actual: labels.to_vec(),
        });
    }
    Ok(())
}

fn clamped_log(g: &mut Graph, x: Var) -> Var {
    let c = g.clamp(x, LOG_EPS, 1.0 - LOG_EPS);
    g.log(c)
}

/// Per-image `−Σ_l w_l log(p_l)`.
fn weighted_nll_rows(g: &mut Graph, weights: Var, probs: Var) -> Var {
    let lp = clamped_log(g, probs);
    let prod = g.mul(weights, lp);
    let rows = g.sum_rows(prod);
    g.scale(rows, -1.0)
}

fn positive_rows(g: &mut Graph, z_plus: &Tensor, yhat: Var) -> Var {
    let w = g.constant(z_plus.clone());
    weighted_nll_rows(g, w, yhat)
}

fn negative_rows(g: &mut Graph, z_minus: Var, yhat: Var) -> Var {
    let q = g.rsub_scalar(yhat, 1.0);
    weighted_nll_rows(g, z_minus, q)
}

/// `CE(z⁺, ŷ) = −Σ z⁺ log ŷ`.
pub fn ce_loss(g: &mut Graph, z_plus: &Tensor, yhat: Var) -> Result<Var> {
    check_shape(g, yhat, z_plus.shape(), "ce_loss")?;
    let rows = positive_rows(g, z_plus, yhat);
    Ok(g.sum(rows))
}

/// `CE(z⁺, ŷ) + scale · CE(z⁻, 1 − ŷ)`, combined per image.
fn two_sided(g: &mut Graph, z_plus: &Tensor, z_minus: Var, scale: f64, yhat: Var) -> Var {
    let pos = positive_rows(g, z_plus, yhat);
    let mut neg = negative_rows(g, z_minus, yhat);
    if scale != 1.0 {
        neg = g.scale(neg, scale);
    }
    let rows = g.add(pos, neg);
    g.sum(rows)
}

/// `CE(z⁺, ŷ) + CE(z⁻, 1 − ŷ)`.
pub fn bce_loss(g: &mut Graph, z_plus: &Tensor, z_minus: &Tensor, yhat: Var) -> Result<Var> {
    check_shape(g, yhat, z_plus.shape(), "bce_loss")?;
    check_compatible(z_plus, z_minus)?;
    let zm = g.constant(z_minus.clone());
    Ok(two_sided(g, z_plus, zm, 1.0, yhat))
}

/// `CE(z⁺, ŷ) + λ · CE(1 − z⁺, 1 − ŷ)`.
pub fn an_loss(g: &mut Graph, z_plus: &Tensor, yhat: Var, lambda: f64) -> Result<Var> {
    check_shape(g, yhat, z_plus.shape(), "an_loss")?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "assume-negative weight must be ≥ 0, got {lambda}"
        )));
    }
    let zm = g.constant(z_plus.map(|v| 1.0 - v));
    Ok(two_sided(g, z_plus, zm, lambda, yhat))
}

/// `CE(z⁺, ŷ) + λ · (Σ_l ŷ_l − k)²` per image.
pub fn epr_loss(g: &mut Graph, z_plus: &Tensor, yhat: Var, k: f64, lambda: f64) -> Result<Var> {
    check_shape(g, yhat, z_plus.shape(), "epr_loss")?;
    if k.is_nan() || k <= 0.0 {
        return Err(Error::Config(format!("expected positive count must be > 0, got {k}")));
    }
    let pos = positive_rows(g, z_plus, yhat);
    let total = g.sum_rows(yhat);
    let resid = g.add_scalar(total, -k);
    let sq = g.mul(resid, resid);
    let pen = g.scale(sq, lambda);
    let rows = g.add(pos, pen);
    Ok(g.sum(rows))
}

/// `CE(z⁺, ŷ) + CE(z̃⁻, 1 − ŷ)` with continuous weak negatives `z_tilde`.
///
/// `z_tilde` may be a constant (detached estimate) or a differentiable node.
pub fn wn_loss(g: &mut Graph, z_plus: &Tensor, z_tilde: Var, yhat: Var) -> Result<Var> {
    check_shape(g, yhat, z_plus.shape(), "wn_loss")?;
    let zs = g.shape(z_tilde).to_vec();
    check_shape(g, yhat, &zs, "wn_loss weak negatives")?;
    Ok(two_sided(g, z_plus, z_tilde, 1.0, yhat))
}

/// Applies a batch reduction to a summed loss over `n` images.
pub fn reduce(g: &mut Graph, summed: Var, n: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => summed,
        Reduction::Mean => g.scale(summed, 1.0 / n.max(1) as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(build: impl FnOnce(&mut Graph, Var) -> Result<Var>, yhat: Tensor) -> f64 {
        let mut g = Graph::new();
        let y = g.input(yhat);
        let l = build(&mut g, y).unwrap();
        g.value(l).item()
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn ce_examples() {
        let z = v(&[1.0, 0.0]);
        assert!(value(|g, y| ce_loss(g, &z, y), v(&[1.0 - LOG_EPS, 0.3])) < 1e-11);
        let l = value(|g, y| ce_loss(g, &z, y), v(&[0.5, 0.9]));
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(value(|g, y| ce_loss(g, &v(&[0.0, 0.0]), y), v(&[0.5, 0.9])), 0.0);
    }

    #[test]
    fn bce_rejects_incompatible_observations() {
        let mut g = Graph::new();
        let y = g.input(v(&[0.5, 0.5]));
        let err = bce_loss(&mut g, &v(&[1.0, 0.0]), &v(&[1.0, 1.0]), y).unwrap_err();
        assert!(matches!(err, Error::Labels(_)));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let y = g.input(v(&[0.5, 0.5, 0.5]));
        assert!(matches!(ce_loss(&mut g, &v(&[1.0, 0.0]), y), Err(Error::Shape { .. })));
    }

    #[test]
    fn negative_lambda_is_a_config_error() {
        let mut g = Graph::new();
        let y = g.input(v(&[0.5, 0.5]));
        assert!(matches!(
            an_loss(&mut g, &v(&[1.0, 0.0]), y, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn epr_penalty_is_symmetric() {
        let z = v(&[1.0, 0.0]);
        let over = value(|g, y| epr_loss(g, &z, y, 1.0, 1.0), v(&[0.5, 0.8]));
        let under = value(|g, y| epr_loss(g, &z, y, 1.6, 1.0), v(&[0.5, 0.8]));
        assert!((over - under).abs() < 1e-15);
    }

    #[test]
    fn ce_gradient_ignores_unobserved_labels() {
        let mut g = Graph::new();
        let y = g.input(v(&[0.3, 0.6, 0.2]));
        let l = ce_loss(&mut g, &v(&[0.0, 1.0, 0.0]), y).unwrap();
        let grad = g.backward(l).unwrap().wrt(y).unwrap().clone();
        assert_eq!(grad.data()[0], 0.0);
        assert_eq!(grad.data()[2], 0.0);
        assert!(grad.data()[1] < 0.0);
    }

    #[test]
    fn label_vector_ranges() {
        assert!(LabelVector::new(LabelKind::ObservedPositive, vec![0.0, 1.0]).is_ok());
        assert!(LabelVector::new(LabelKind::ObservedPositive, vec![0.5]).is_err());
        assert!(LabelVector::new(LabelKind::WeakNegative, vec![0.5, 1.0]).is_ok());
        assert!(LabelVector::new(LabelKind::Prediction, vec![1.0]).is_err());
    }

    #[test]
    fn loss_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("role".parse::<LossKind>().is_err());
    }
}
