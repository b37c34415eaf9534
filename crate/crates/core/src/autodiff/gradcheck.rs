//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds the op under test from its inputs.
pub type BuildFn = fn(&mut Graph, &[Var]) -> Var;

/// Reports whether element `elem` of input `input` sits within `eps` of a
/// point where the op is not differentiable.
pub type KinkFn = fn(inputs: &[Tensor], input: usize, elem: usize, eps: f64) -> bool;

/// An op known to the checker, with its default probe shapes and input domain.
#[derive(Clone, Copy)]
pub struct RegisteredOp {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: BuildFn,
    /// Inputs are drawn uniformly from this interval.
    pub domain: (f64, f64),
    pub kink: Option<KinkFn>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that gradients which are
    /// analytically zero are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Sample points skipped because they lie on a kink.
    pub excluded: usize,
    pub pass: bool,
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.pass &= other.pass;
    }
}

fn near(inputs: &[Tensor], input: usize, elem: usize, at: f64, eps: f64) -> bool {
    (inputs[input].data()[elem] - at).abs() <= eps
}

fn relu_kink(inputs: &[Tensor], input: usize, elem: usize, eps: f64) -> bool {
    near(inputs, input, elem, 0.0, eps)
}

fn threshold_kink(inputs: &[Tensor], input: usize, elem: usize, eps: f64) -> bool {
    near(inputs, input, elem, THRESHOLD, eps)
}

fn clamp_kink(inputs: &[Tensor], input: usize, elem: usize, eps: f64) -> bool {
    near(inputs, input, elem, CLAMP.0, eps) || near(inputs, input, elem, CLAMP.1, eps)
}

const THRESHOLD: f64 = 0.3;
const CLAMP: (f64, f64) = (-0.5, 0.5);

static REGISTRY: &[RegisteredOp] = &[
    RegisteredOp {
        name: "matmul",
        shapes: &[&[3, 4], &[4, 2]],
        build: |g, v| g.matmul(v[0], v[1]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "transpose",
        shapes: &[&[3, 4]],
        build: |g, v| g.transpose(v[0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "conv2d",
        shapes: &[&[2, 3, 7, 6], &[4, 3, 3, 3]],
        build: |g, v| g.conv2d(v[0], v[1], 2, 1, 1),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "conv2d_depthwise",
        shapes: &[&[2, 4, 5, 5], &[4, 1, 3, 3]],
        build: |g, v| g.conv2d(v[0], v[1], 1, 1, 4),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "channel_affine",
        shapes: &[&[2, 3, 2, 2], &[3], &[3]],
        build: |g, v| g.channel_affine(v[0], v[1], v[2]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "global_avg_pool",
        shapes: &[&[2, 3, 3, 2]],
        build: |g, v| g.global_avg_pool(v[0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "add_row_broadcast",
        shapes: &[&[3, 4], &[4]],
        build: |g, v| g.add_row_broadcast(v[0], v[1]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "add",
        shapes: &[&[3, 4], &[3, 4]],
        build: |g, v| g.add(v[0], v[1]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "sub",
        shapes: &[&[3, 4], &[3, 4]],
        build: |g, v| g.sub(v[0], v[1]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "mul",
        shapes: &[&[3, 4], &[3, 4]],
        build: |g, v| g.mul(v[0], v[1]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "scale",
        shapes: &[&[5]],
        build: |g, v| g.scale(v[0], -1.7),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "add_scalar",
        shapes: &[&[5]],
        build: |g, v| g.add_scalar(v[0], 0.4),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "rsub_scalar",
        shapes: &[&[5]],
        build: |g, v| g.rsub_scalar(v[0], 1.0),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "softmax",
        shapes: &[&[3, 5]],
        build: |g, v| g.softmax_rows(v[0]),
        domain: (-3.0, 3.0),
        kink: None,
    },
    RegisteredOp {
        name: "gelu",
        shapes: &[&[10]],
        build: |g, v| g.gelu(v[0]),
        domain: (-3.0, 3.0),
        kink: None,
    },
    RegisteredOp {
        name: "swish",
        shapes: &[&[10]],
        build: |g, v| g.swish(v[0]),
        domain: (-3.0, 3.0),
        kink: None,
    },
    RegisteredOp {
        name: "relu",
        shapes: &[&[10]],
        build: |g, v| g.relu(v[0]),
        domain: (-1.0, 1.0),
        kink: Some(relu_kink),
    },
    RegisteredOp {
        name: "thresholded_relu",
        shapes: &[&[10]],
        build: |g, v| g.thresholded_relu(v[0], THRESHOLD),
        domain: (-1.0, 1.0),
        kink: Some(threshold_kink),
    },
    RegisteredOp {
        name: "log",
        shapes: &[&[10]],
        build: |g, v| g.log(v[0]),
        domain: (0.1, 3.0),
        kink: None,
    },
    RegisteredOp {
        name: "clamp",
        shapes: &[&[10]],
        build: |g, v| g.clamp(v[0], CLAMP.0, CLAMP.1),
        domain: (-1.0, 1.0),
        kink: Some(clamp_kink),
    },
    RegisteredOp {
        name: "sum",
        shapes: &[&[3, 4]],
        build: |g, v| g.sum(v[0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "mean",
        shapes: &[&[3, 4]],
        build: |g, v| g.mean(v[0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "sum_rows",
        shapes: &[&[3, 4]],
        build: |g, v| g.sum_rows(v[0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "max_rows",
        shapes: &[&[3, 4]],
        build: |g, v| g.max_rows(v[0]),
        domain: (-1.0, 1.0),
        kink: Some(max_rows_kink),
    },
    RegisteredOp {
        name: "diagonal",
        shapes: &[&[4, 4]],
        build: |g, v| g.diagonal(v[0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "cosine_similarity",
        shapes: &[&[3, 5], &[4, 5]],
        build: |g, v| g.cosine_rows(v[0], v[1]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "cosine_self_similarity",
        shapes: &[&[4, 5]],
        build: |g, v| g.cosine_rows(v[0], v[0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "select_columns",
        shapes: &[&[3, 5]],
        build: |g, v| g.select_columns(v[0], &[4, 0, 2, 0]),
        domain: (-1.0, 1.0),
        kink: None,
    },
    RegisteredOp {
        name: "slice_rows",
        shapes: &[&[5, 3]],
        build: |g, v| g.slice_rows(v[0], 1, 3),
        domain: (-1.0, 1.0),
        kink: None,
    },
];

/// A row element is a kink when the row's top two values are within `2·eps`.
fn max_rows_kink(inputs: &[Tensor], input: usize, elem: usize, eps: f64) -> bool {
    let t = &inputs[input];
    let cols = if t.rank() == 1 { t.len() } else { t.dims2().1 };
    let row = &t.data()[(elem / cols) * cols..(elem / cols + 1) * cols];
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.len() > 1 && sorted[0] - sorted[1] <= 2.0 * eps
}

pub fn registered_ops() -> &'static [RegisteredOp] {
    REGISTRY
}

pub fn lookup(name: &str) -> Result<&'static RegisteredOp> {
    REGISTRY
        .iter()
        .find(|op| op.name == name)
        .ok_or_else(|| Error::UnknownOp(name.to_string()))
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], domain: (f64, f64)) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(domain.0..domain.1)).collect())
}

/// Runs the registered op `name` at `points` random inputs of the given
/// shapes (`None` uses the registered defaults).
pub fn finite_difference_check(
    name: &str,
    shapes: Option<&[Vec<usize>]>,
    cfg: &GradCheckConfig,
    points: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let op = lookup(name)?;
    let shapes: Vec<Vec<usize>> = match shapes {
        Some(s) => s.to_vec(),
        None => op.shapes.iter().map(|s| s.to_vec()).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
        pass: true,
    };
    for _ in 0..points {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, op.domain)).collect();
        let weight_seed = rng.random();
        report.merge(check_function(name, op.build, op.kink, inputs, cfg, weight_seed)?);
    }
    Ok(report)
}

/// Checks the registered op `name` at exactly `inputs`.
pub fn check_op_at(name: &str, inputs: Vec<Tensor>, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let op = lookup(name)?;
    check_function(name, op.build, op.kink, inputs, cfg, 0)
}

/// Compares analytic and central-difference gradients of
/// `sum(build(inputs) ⊙ R)` for a fixed random weighting `R`.
pub fn check_function(
    name: &str,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    kink: Option<KinkFn>,
    inputs: Vec<Tensor>,
    cfg: &GradCheckConfig,
    weight_seed: u64,
) -> Result<GradCheckReport> {
    if cfg.eps <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut weights: Option<Tensor> = None;
    let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
    let mut eval = |inputs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let w = weights
            .get_or_insert_with(|| random_tensor(&mut wrng, g.shape(out), (0.5, 1.5)))
            .clone();
        let wv = g.constant(w);
        let prod = g.mul(out, wv);
        let root = g.sum(prod);
        let value = g.value(root).item();
        if !want_grad {
            return Ok((value, vec![]));
        }
        let grads = g.backward(root)?;
        let gs = vars
            .iter()
            .map(|&v| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        Ok((value, gs))
    };
    let (_, analytic) = eval(&inputs, true)?;
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        excluded: 0,
        pass: true,
    };
    let mut probe = inputs.clone();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            if kink.is_some_and(|k| k(&inputs, i, e, cfg.eps)) {
                report.excluded += 1;
                continue;
            }
            let x = input.data()[e];
            probe[i].data_mut()[e] = x + cfg.eps;
            let (plus, _) = eval(&probe, false)?;
            probe[i].data_mut()[e] = x - cfg.eps;
            let (minus, _) = eval(&probe, false)?;
            probe[i].data_mut()[e] = x;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_a_lookup_error() {
        assert!(matches!(lookup("frobnicate"), Err(Error::UnknownOp(_))));
    }

    #[test]
    fn matmul_4x5_by_5x3_passes() {
        let r = finite_difference_check(
            "matmul",
            Some(&[vec![4, 5], vec![5, 3]]),
            &GradCheckConfig::default(),
            5,
            1,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 5 * (20 + 15));
    }

    #[test]
    fn gelu_on_a_thousand_scalars_passes() {
        let r = finite_difference_check("gelu", Some(&[vec![1000]]), &GradCheckConfig::default(), 1, 2).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 1000);
    }

    #[test]
    fn relu_at_zero_is_excluded() {
        let x = Tensor::vector(vec![-0.7, 0.0, 0.4, 1.2]);
        let r = check_op_at("relu", vec![x], &GradCheckConfig::default()).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 3);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn a_wrong_gradient_fails() {
        // d/dx of x*x taken as x: the checker must notice.
        let r = check_function(
            "broken",
            |g, v| {
                let c = g.constant(g.value(v[0]).clone());
                g.mul(v[0], c)
            },
            None,
            vec![Tensor::vector(vec![0.5, 1.5])],
            &GradCheckConfig::default(),
            0,
        )
        .unwrap();
        assert!(!r.pass);
    }
}
