//! Label codebook, cross-attention pooling and the shared softmax classifier.
//!
//! For an image with patch embeddings `E_patch` (`m×F`):
//!
//! ```text
//! A       = softmax_rows(E_label · E_patchᵀ)          |L| × m
//! E_image = f(A · E_patch) + A · E_patch              |L| × F
//! ŷ_l     = softmax_k(W_k · e_image_l) evaluated at k = l
//! ```
//!
//! `f` is a two-layer GELU MLP applied row by row. Each `ŷ_l` lies in `(0, 1)`
//! but the `ŷ_l` do not sum to one: every label is scored from its own
//! representation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Init, ParameterStore, Var};
use crate::error::{Error, Result};

pub const CODEBOOK: &str = "codebook/labels";
pub const MLP_PREFIX: &str = "pool_mlp";
pub const CLASSIFIER: &str = "classifier/weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_labels: usize,
    pub embedding_dim: usize,
    pub mlp_hidden: usize,
    /// Divide attention logits by `√F`. Off by default.
    #[serde(default)]
    pub scaled_scores: bool,
}

impl HeadConfig {
    pub fn new(num_labels: usize, embedding_dim: usize) -> Self {
        Self {
            num_labels,
            embedding_dim,
            mlp_hidden: 256,
            scaled_scores: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::Config("the classifier needs at least two labels".into()));
        }
        if self.embedding_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Graph handles for one image's pass through the head.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `|L| × m` attention weights.
    pub attention: Var,
    /// `|L| × F` pooled representations before the MLP (`A · E_patch`).
    pub pooled: Var,
    /// `|L| × F` image representations.
    pub representations: Var,
    /// `|L| × |L|` classifier logits; row `l` scores representation `l`.
    pub logits: Var,
    /// `|L|` predictions.
    pub predictions: Var,
}

pub struct AttentionHead {
    cfg: HeadConfig,
}

impl AttentionHead {
    pub fn new(cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        let (l, f, h) = (self.cfg.num_labels, self.cfg.embedding_dim, self.cfg.mlp_hidden);
        store.init(CODEBOOK, &[l, f], Init::unit_variance(f))?;
        store.init(&format!("{MLP_PREFIX}/dense1/weight"), &[f, h], Init::unit_variance(f))?;
        store.init(&format!("{MLP_PREFIX}/dense1/bias"), &[h], Init::Zeros)?;
        store.init(&format!("{MLP_PREFIX}/dense2/weight"), &[h, f], Init::unit_variance(h))?;
        store.init(&format!("{MLP_PREFIX}/dense2/bias"), &[f], Init::Zeros)?;
        store.init(CLASSIFIER, &[l, f], Init::unit_variance(f))?;
        Ok(())
    }

    /// Runs the head on `patch_embeddings` (`m × F`).
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, patch_embeddings: Var) -> Result<HeadOutputs> {
        let shape = g.shape(patch_embeddings).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.embedding_dim {
            return Err(Error::Shape {
                context: "attention head input",
                expected: vec![shape.first().copied().unwrap_or(0), self.cfg.embedding_dim],
                actual: shape,
            });
        }
        let codebook = g.param(store, CODEBOOK);
        let attention = attention_scores(g, codebook, patch_embeddings, self.cfg.scaled_scores)?;
        let mlp = PoolMlp::bind(g, store);
        let (pooled, representations) = pool_representations(g, attention, patch_embeddings, &mlp);
        let w = g.param(store, CLASSIFIER);
        let (logits, predictions) = classify(g, representations, w);
        Ok(HeadOutputs {
            attention,
            pooled,
            representations,
            logits,
            predictions,
        })
    }
}

/// `softmax_rows(codebook · embeddingsᵀ)`, optionally scaled by `1/√F`.
pub fn attention_scores(g: &mut Graph, codebook: Var, embeddings: Var, scaled: bool) -> Result<Var> {
    let (m, f) = g.value(embeddings).dims2();
    if m == 0 {
        return Err(Error::EmptyPatchSet);
    }
    let fc = g.value(codebook).dims2().1;
    if f != fc {
        return Err(Error::Shape {
            context: "attention_scores",
            expected: vec![fc],
            actual: vec![f],
        });
    }
    let et = g.transpose(embeddings);
    let mut scores = g.matmul(codebook, et);
    if scaled {
        scores = g.scale(scores, 1.0 / (f as f64).sqrt());
    }
    Ok(g.softmax_rows(scores))
}

/// Weights of the feed-forward `f`, bound into a graph.
pub struct PoolMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PoolMlp {
    pub fn bind(g: &mut Graph, store: &ParameterStore) -> Self {
        Self {
            w1: g.param(store, &format!("{MLP_PREFIX}/dense1/weight")),
            b1: g.param(store, &format!("{MLP_PREFIX}/dense1/bias")),
            w2: g.param(store, &format!("{MLP_PREFIX}/dense2/weight")),
            b2: g.param(store, &format!("{MLP_PREFIX}/dense2/bias")),
        }
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.matmul(x, self.w1);
        let h = g.add_row_broadcast(h, self.b1);
        let h = g.gelu(h);
        let o = g.matmul(h, self.w2);
        g.add_row_broadcast(o, self.b2)
    }
}

/// Returns `(A·E_patch, f(A·E_patch) + A·E_patch)`.
pub fn pool_representations(g: &mut Graph, attention: Var, embeddings: Var, mlp: &PoolMlp) -> (Var, Var) {
    let pooled = g.matmul(attention, embeddings);
    let transformed = mlp.apply(g, pooled);
    (pooled, g.add(transformed, pooled))
}

/// Returns `(logits, ŷ)` where `logits = reps · Wᵀ` and `ŷ_l = softmax(logits_l)_l`.
pub fn classify(g: &mut Graph, representations: Var, classifier: Var) -> (Var, Var) {
    let wt = g.transpose(classifier);
    let logits = g.matmul(representations, wt);
    let probs = g.softmax_rows(logits);
    (logits, g.diagonal(probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn identical_embeddings_give_uniform_attention() {
        let mut g = Graph::new();
        let cb = g.input(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.5, 0.1]));
        let e = g.constant(Tensor::matrix(4, 3, [0.2, 0.7, -0.4].repeat(4)));
        let a = attention_scores(&mut g, cb, e, false).unwrap();
        for v in g.value(a).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_scalar_softmax() {
        // One label, logits [10, 0, 0].
        let mut g = Graph::new();
        let cb = g.input(Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let e = g.constant(Tensor::matrix(3, 2, vec![10.0, 1.0, 0.0, 2.0, 0.0, -3.0]));
        let a = attention_scores(&mut g, cb, e, false).unwrap();
        let z = 2.0 + 10f64.exp();
        let want = [10f64.exp() / z, 1.0 / z, 1.0 / z];
        for (v, w) in g.value(a).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-15);
        }
        assert!((g.value(a).data()[0] - 0.999909).abs() < 1e-6);
        assert!((g.value(a).data()[1] - 0.0000454).abs() < 1e-7);
    }

    #[test]
    fn empty_patch_set_is_rejected() {
        let mut g = Graph::new();
        let cb = g.input(Tensor::matrix(2, 3, vec![0.0; 6]));
        let e = g.constant(Tensor::matrix(0, 3, vec![]));
        assert!(matches!(
            attention_scores(&mut g, cb, e, false),
            Err(Error::EmptyPatchSet)
        ));
    }

    #[test]
    fn zero_final_layer_makes_pooling_the_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]));
        let e = g.constant(Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.0, 3.0, 1.0]));
        let mlp = PoolMlp {
            w1: g.constant(Tensor::matrix(2, 4, vec![0.7; 8])),
            b1: g.constant(Tensor::vector(vec![0.1; 4])),
            w2: g.constant(Tensor::zeros(&[4, 2])),
            b2: g.constant(Tensor::zeros(&[2])),
        };
        let (pooled, reps) = pool_representations(&mut g, a, e, &mlp);
        assert_eq!(g.value(pooled), g.value(reps));
    }

    #[test]
    fn classifier_matches_scalar_softmax() {
        // W_1·e_1 = 2, W_2·e_1 = 0, W_1·e_2 = 0, W_2·e_2 = 3.
        let mut g = Graph::new();
        let reps = g.constant(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]));
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let (_, yhat) = classify(&mut g, reps, w);
        let y = g.value(yhat).data();
        let want = [2f64.exp() / (2f64.exp() + 1.0), 3f64.exp() / (1.0 + 3f64.exp())];
        assert!((y[0] - want[0]).abs() < 1e-15 && (y[1] - want[1]).abs() < 1e-15);
        assert!((y[0] - 0.8808).abs() < 1e-4 && (y[1] - 0.9526).abs() < 1e-4);
    }

    #[test]
    fn identical_classifier_rows_give_one_over_l() {
        let mut g = Graph::new();
        let reps = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]));
        let w = g.constant(Tensor::matrix(3, 2, [0.4, -0.2].repeat(3)));
        let (_, yhat) = classify(&mut g, reps, w);
        for v in g.value(yhat).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
