//! Tape-style reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every input of a node has a
//! smaller index than the node itself and a reverse sweep over the node list
//! is a valid topological order for the backward pass.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{col2im_add, gemm, im2col, ConvGeometry};
use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        bias: Var,
    },
    GlobalAvgPool(Var),
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    RSubScalar(Var),
    SoftmaxRows(Var),
    Gelu(Var),
    Swish(Var),
    Relu(Var),
    Threshold(Var, f64),
    Log(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxRows(Var),
    Diagonal(Var),
    CosineRows(Var, Var),
    SelectColumns(Var, Vec<usize>),
    SliceRows(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::AddRowBroadcast(..) => "add_row_broadcast",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::RSubScalar(_) => "rsub_scalar",
            Op::SoftmaxRows(_) => "softmax",
            Op::Gelu(_) => "gelu",
            Op::Swish(_) => "swish",
            Op::Relu(_) => "relu",
            Op::Threshold(..) => "thresholded_relu",
            Op::Log(_) => "log",
            Op::Clamp(..) => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::MaxRows(_) => "max_rows",
            Op::Diagonal(_) => "diagonal",
            Op::CosineRows(..) => "cosine_similarity",
            Op::SelectColumns(..) => "select_columns",
            Op::SliceRows(..) => "slice_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward computation, recorded for differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    param_of: HashMap<Var, String>,
    first_non_finite: Option<&'static str>,
}

/// Gradients of a scalar root with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Rows and columns of a rank-1 (treated as one row) or rank-2 tensor.
fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.rank() {
        1 => (1, t.len()),
        2 => t.dims2(),
        _ => panic!("expected rank 1 or 2, got shape {:?}", t.shape()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the first op whose output contained NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that is not tied to a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to `path` in `store`. Repeated calls return the same node.
    ///
    /// Panics if the path is not in the store; parameter layout is fixed by
    /// the model's `init` and a missing path is a programming error.
    pub fn param(&mut self, store: &ParameterStore, path: &str) -> Var {
        if let Some(&v) = self.params.get(path) {
            return v;
        }
        let value = store
            .get(path)
            .unwrap_or_else(|| panic!("parameter `{path}` is not in the store"))
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(path.to_string(), v);
        self.param_of.insert(v, path.to_string());
        v
    }

    /// Parameters bound into this graph, by path.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(c, r, out), Op::Transpose(a), rg)
    }

    /// Grouped 2-D convolution of `input` (`N×C×H×W`) with `weight`
    /// (`O×(C/groups)×k×k`), no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize, groups: usize) -> Var {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be N×C×H×W, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be O×C×k×k, got {ws:?}");
        assert!(stride >= 1 && groups >= 1);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, cg, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(o % groups, 0, "outputs {o} not divisible by groups {groups}");
        assert_eq!(cg, c / groups, "weight expects {cg} input channels per group");
        assert!(
            h + 2 * padding >= k && w + 2 * padding >= k,
            "kernel larger than padded input"
        );
        let og = o / groups;
        let geo = ConvGeometry {
            channels: cg,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        };
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let mut out = vec![0.0; n * o * ho * wo];
        let mut cols = vec![0.0; geo.col_rows() * geo.col_cols()];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let wsize = og * cg * k * k;
        for s in 0..n {
            for g in 0..groups {
                let xin = &x[(s * c + g * cg) * h * w..(s * c + (g + 1) * cg) * h * w];
                im2col(xin, &geo, &mut cols);
                let dst = &mut out[(s * o + g * og) * ho * wo..(s * o + (g + 1) * og) * ho * wo];
                gemm(
                    og,
                    geo.col_rows(),
                    ho * wo,
                    &wt[g * wsize..(g + 1) * wsize],
                    false,
                    &cols,
                    false,
                    0.0,
                    dst,
                );
            }
        }
        let rg = self.rg(input) || self.rg(weight);
        self.push(
            Tensor::from_vec(&[n, o, ho, wo], out),
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                groups,
            },
            rg,
        )
    }

    /// Per-channel `x·scale[c] + bias[c]` over an `N×C×…` tensor.
    pub fn channel_affine(&mut self, input: Var, scale: Var, bias: Var) -> Var {
        let xs = self.shape(input).to_vec();
        assert!(xs.len() >= 2, "channel_affine needs N×C×…");
        let c = xs[1];
        assert_eq!(self.shape(scale), [c], "scale must have one entry per channel");
        assert_eq!(self.shape(bias), [c], "bias must have one entry per channel");
        let inner: usize = xs[2..].iter().product();
        let x = self.value(input).data();
        let s = self.value(scale).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; x.len()];
        for (blk, (src, dst)) in x.chunks(inner).zip(out.chunks_mut(inner)).enumerate() {
            let ch = blk % c;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * s[ch] + b[ch];
            }
        }
        let rg = self.rg(input) || self.rg(scale) || self.rg(bias);
        self.push(Tensor::from_vec(&xs, out), Op::ChannelAffine { input, scale, bias }, rg)
    }

    /// Mean over the spatial axes: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let xs = self.shape(input).to_vec();
        assert_eq!(xs.len(), 4, "global_avg_pool input must be N×C×H×W");
        let inner = xs[2] * xs[3];
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let rg = self.rg(input);
        self.push(Tensor::matrix(xs[0], xs[1], out), Op::GlobalAvgPool(input), rg)
    }

    /// Adds the vector `bias` (`D`) to every row of `x` (`N×D`).
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        assert_eq!(self.shape(bias), [d], "bias length must match row width");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::matrix(n, d, out), Op::AddRowBroadcast(x, bias), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{} operands must share a shape", op.name());
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map_unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map_unary(a, Op::RSubScalar(a), |x| c - x)
    }

    /// Row-wise softmax with max subtraction. Rank-1 inputs are one row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (_, cols) = rows_cols(t);
        assert!(cols > 0, "softmax over an empty row");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_vec(&shape, out), Op::SoftmaxRows(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Gelu(a), gelu)
    }

    pub fn swish(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Swish(a), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `x` where `x > theta`, else 0.
    pub fn thresholded_relu(&mut self, a: Var, theta: f64) -> Var {
        self.map_unary(a, Op::Threshold(a, theta), |x| if x > theta { x } else { 0.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi);
        self.map_unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Sum of all elements, accumulated in storage order.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(0.0, |acc, &v| acc + v);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert!(!t.is_empty(), "mean of an empty tensor");
        let s = t.data().iter().fold(0.0, |acc, &v| acc + v) / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Per-row sums: `N×D → N` (rank-1 input gives a length-1 output).
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = rows_cols(t);
        let out: Vec<f64> = if c == 0 {
            vec![0.0; r]
        } else {
            t.data()
                .chunks(c)
                .map(|row| row.iter().fold(0.0, |acc, &v| acc + v))
                .collect()
        };
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::SumRows(a), rg)
    }

    /// Per-row maxima: `N×D → N`. Ties resolve to the lowest column.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (_, c) = rows_cols(t);
        assert!(c > 0, "max over an empty row");
        let out: Vec<f64> = t.data().chunks(c).map(|row| row[argmax(row)]).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::MaxRows(a), rg)
    }

    pub fn diagonal(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        assert_eq!(r, c, "diagonal of a non-square matrix");
        let out: Vec<f64> = (0..r).map(|i| t.data()[i * c + i]).collect();
        let rg = self.rg(a);
        self.push(Tensor::vector(out), Op::Diagonal(a), rg)
    }

    /// Pairwise cosine similarities between the rows of `a` (`n×F`) and `b`
    /// (`k×F`). A zero-norm row yields similarity 0 and no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, f) = ta.dims2();
        let (k, f2) = tb.dims2();
        assert_eq!(f, f2, "cosine_rows feature widths differ");
        let na: Vec<f64> = (0..n).map(|i| norm(ta.row(i))).collect();
        let nb: Vec<f64> = (0..k).map(|j| norm(tb.row(j))).collect();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                if na[i] > 0.0 && nb[j] > 0.0 {
                    out[i * k + j] = dot(ta.row(i), tb.row(j)) / (na[i] * nb[j]);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(n, k, out), Op::CosineRows(a, b), rg)
    }

    pub fn select_columns(&mut self, a: Var, columns: &[usize]) -> Var {
        let t = self.value(a);
        let (r, c) = rows_cols(t);
        assert!(columns.iter().all(|&j| j < c), "column index out of range");
        let mut out = Vec::with_capacity(r * columns.len());
        for row in t.data().chunks(c.max(1)).take(r) {
            out.extend(columns.iter().map(|&j| row[j]));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::matrix(r, columns.len(), out),
            Op::SelectColumns(a, columns.to_vec()),
            rg,
        )
    }

    /// Rows `start..start + len` of an `N×D` matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        assert!(start + len <= r, "row slice {start}..{} out of {r} rows", start + len);
        let out = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(len, c, out), Op::SliceRows(a, start), rg)
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rt = self.value(root);
        if rt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                rt.shape()
            )));
        }
        if let Some(op) = self.first_non_finite {
            return Err(Error::NonFinite { op });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rt.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                for (v, contrib) in self.node_backward(idx, &g) {
                    if !self.rg(v) {
                        continue;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `root` for every parameter in `store`; parameters the
    /// root does not reach get zeros.
    pub fn param_gradients(&self, root: Var, store: &ParameterStore) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(root)?;
        Ok(store
            .iter()
            .map(|(path, value)| {
                let g = self
                    .params
                    .get(path)
                    .and_then(|&v| grads.wrt(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (path.clone(), g)
            })
            .collect())
    }

    fn node_backward(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let mut res = Vec::new();
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, self.value(*b).data(), true, 0.0, &mut da);
                    res.push((*a, Tensor::matrix(m, k, da)));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut db);
                    res.push((*b, Tensor::matrix(k, n, db)));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[j * r + i];
                    }
                }
                vec![(*a, Tensor::matrix(r, c, da))]
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
                groups,
            } => self.conv2d_backward(*input, *weight, *stride, *padding, *groups, gd),
            Op::ChannelAffine { input, scale, bias } => {
                let xs = self.shape(*input);
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let x = self.value(*input).data();
                let s = self.value(*scale).data();
                let mut dx = vec![0.0; x.len()];
                let mut ds = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for (blk, ((gc, xc), dxc)) in gd
                    .chunks(inner)
                    .zip(x.chunks(inner))
                    .zip(dx.chunks_mut(inner))
                    .enumerate()
                {
                    let ch = blk % c;
                    for ((&gv, &xv), d) in gc.iter().zip(xc).zip(dxc.iter_mut()) {
                        *d = gv * s[ch];
                        ds[ch] += gv * xv;
                        dbias[ch] += gv;
                    }
                }
                vec![
                    (*input, Tensor::from_vec(xs, dx)),
                    (*scale, Tensor::vector(ds)),
                    (*bias, Tensor::vector(dbias)),
                ]
            }
            Op::GlobalAvgPool(a) => {
                let xs = self.shape(*a);
                let inner = xs[2] * xs[3];
                let inv = 1.0 / inner as f64;
                let mut dx = Vec::with_capacity(inner * gd.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * inv, inner));
                }
                vec![(*a, Tensor::from_vec(xs, dx))]
            }
            Op::AddRowBroadcast(x, b) => {
                let d = self.shape(*b)[0];
                let mut db = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(db))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                vec![
                    (*a, Tensor::from_vec(ta.shape(), da)),
                    (*b, Tensor::from_vec(tb.shape(), db)),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|v| v * f))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::RSubScalar(a) => vec![(*a, g.map(|v| -v))],
            Op::SoftmaxRows(a) => {
                let (_, c) = rows_cols(out);
                let mut dx = vec![0.0; out.len()];
                for ((y, gr), d) in out.data().chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let inner: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, &yv), &gv) in d.iter_mut().zip(y).zip(gr) {
                        *dv = yv * (gv - inner);
                    }
                }
                vec![(*a, Tensor::from_vec(out.shape(), dx))]
            }
            Op::Gelu(a) => self.unary_grad(*a, gd, |x, _| gelu_grad(x)),
            Op::Swish(a) => self.unary_grad(*a, gd, |x, _| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }),
            Op::Relu(a) => self.unary_grad(*a, gd, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Threshold(a, theta) => {
                let theta = *theta;
                self.unary_grad(*a, gd, move |x, _| if x > theta { 1.0 } else { 0.0 })
            }
            Op::Log(a) => self.unary_grad(*a, gd, |x, _| 1.0 / x),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(*a, gd, move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                vec![(*a, Tensor::full(t.shape(), gd[0]))]
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                vec![(*a, Tensor::full(t.shape(), gd[0] / t.len() as f64))]
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                let (_, c) = rows_cols(t);
                let mut dx = Vec::with_capacity(t.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv, c));
                }
                vec![(*a, Tensor::from_vec(t.shape(), dx))]
            }
            Op::MaxRows(a) => {
                let t = self.value(*a);
                let (_, c) = rows_cols(t);
                let mut dx = vec![0.0; t.len()];
                for (r, row) in t.data().chunks(c).enumerate() {
                    dx[r * c + argmax(row)] = gd[r];
                }
                vec![(*a, Tensor::from_vec(t.shape(), dx))]
            }
            Op::Diagonal(a) => {
                let n = gd.len();
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    dx[i * n + i] = gd[i];
                }
                vec![(*a, Tensor::matrix(n, n, dx))]
            }
            Op::CosineRows(a, b) => self.cosine_backward(*a, *b, out, gd),
            Op::SelectColumns(a, cols) => {
                let t = self.value(*a);
                let (r, c) = rows_cols(t);
                let mut dx = vec![0.0; t.len()];
                for i in 0..r {
                    for (jj, &j) in cols.iter().enumerate() {
                        dx[i * c + j] += gd[i * cols.len() + jj];
                    }
                }
                vec![(*a, Tensor::from_vec(t.shape(), dx))]
            }
            Op::SliceRows(a, start) => {
                let t = self.value(*a);
                let c = t.dims2().1;
                let mut dx = vec![0.0; t.len()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                vec![(*a, Tensor::from_vec(t.shape(), dx))]
            }
        }
    }

    fn unary_grad(&self, a: Var, gd: &[f64], df: impl Fn(f64, f64) -> f64) -> Vec<(Var, Tensor)> {
        let t = self.value(a);
        let dx: Vec<f64> = t.data().iter().zip(gd).map(|(&x, &g)| g * df(x, g)).collect();
        vec![(a, Tensor::from_vec(t.shape(), dx))]
    }

    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        groups: usize,
        gd: &[f64],
    ) -> Vec<(Var, Tensor)> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, cg, k) = (ws[0], ws[1], ws[2]);
        let og = o / groups;
        let geo = ConvGeometry {
            channels: cg,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
        };
        let howo = geo.col_cols();
        let rows = geo.col_rows();
        let want_x = self.rg(input);
        let want_w = self.rg(weight);
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let wsize = og * rows;
        let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
        let mut dw = if want_w { vec![0.0; wt.len()] } else { Vec::new() };
        let mut cols = vec![0.0; rows * howo];
        let mut dcols = vec![0.0; rows * howo];
        for s in 0..n {
            for g in 0..groups {
                let gout = &gd[(s * o + g * og) * howo..(s * o + (g + 1) * og) * howo];
                if want_w {
                    let xin = &x[(s * c + g * cg) * h * w..(s * c + (g + 1) * cg) * h * w];
                    im2col(xin, &geo, &mut cols);
                    gemm(
                        og,
                        howo,
                        rows,
                        gout,
                        false,
                        &cols,
                        true,
                        1.0,
                        &mut dw[g * wsize..(g + 1) * wsize],
                    );
                }
                if want_x {
                    gemm(
                        rows,
                        og,
                        howo,
                        &wt[g * wsize..(g + 1) * wsize],
                        true,
                        gout,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    let dxin = &mut dx[(s * c + g * cg) * h * w..(s * c + (g + 1) * cg) * h * w];
                    col2im_add(&dcols, &geo, dxin);
                }
            }
        }
        let mut res = Vec::new();
        if want_x {
            res.push((input, Tensor::from_vec(&xs, dx)));
        }
        if want_w {
            res.push((weight, Tensor::from_vec(&ws, dw)));
        }
        res
    }

    fn cosine_backward(&self, a: Var, b: Var, out: &Tensor, gd: &[f64]) -> Vec<(Var, Tensor)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, f) = ta.dims2();
        let k = tb.dims2().0;
        let na: Vec<f64> = (0..n).map(|i| norm(ta.row(i))).collect();
        let nb: Vec<f64> = (0..k).map(|j| norm(tb.row(j))).collect();
        let mut da = vec![0.0; n * f];
        let mut db = vec![0.0; k * f];
        for i in 0..n {
            for j in 0..k {
                if na[i] == 0.0 || nb[j] == 0.0 {
                    continue;
                }
                let gv = gd[i * k + j];
                if gv == 0.0 {
                    continue;
                }
                let cij = out.data()[i * k + j];
                let (ai, bj) = (ta.row(i), tb.row(j));
                let inv = 1.0 / (na[i] * nb[j]);
                let ca = cij / (na[i] * na[i]);
                let cb = cij / (nb[j] * nb[j]);
                for p in 0..f {
                    da[i * f + p] += gv * (bj[p] * inv - ca * ai[p]);
                    db[j * f + p] += gv * (ai[p] * inv - cb * bj[p]);
                }
            }
        }
        vec![(a, Tensor::matrix(n, f, da)), (b, Tensor::matrix(k, f, db))]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.3, -1.2, 2.0, 0.0]));
        let s = g.softmax_rows(x);
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        for v in grads.wrt(x).unwrap().data() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_the_op_that_made_it() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 2.0]));
        let l = g.log(x);
        let s = g.sum(l);
        match g.backward(s) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "log"),
            other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = g.input(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(c, x);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn max_rows_ties_pick_lowest_column() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 3, vec![2.0, 2.0, 1.0]));
        let m = g.max_rows(x);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }
}
