//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Parents always precede children, so a single
//! reverse sweep over the node list visits them in topological order.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Elementwise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    Relu,
}

impl FromStr for Unary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Unary::Sigmoid),
            "tanh" => Ok(Unary::Tanh),
            "gelu" => Ok(Unary::Gelu),
            "relu" => Ok(Unary::Relu),
            other => Err(Error::usage(format!("unknown activation '{other}'"))),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Relu => x.max(0.0),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
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

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Unary { kind: Unary, x: Var },
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    GroupMeanRows { x: Var, group: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation graph. Rebuilt for every forward pass.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// Graph whose dropout masks are drawn from a generator seeded with `seed`.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient-tracking input (a parameter or a probe for gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of the last `backward` call, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            View::row_major(self.data(a), m, k),
            View::row_major(self.data(b), k, n),
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul { a, b }))
    }

    /// Batched product over the leading axis: `[B×m×k] · [B×k×n]`, or
    /// `[B×m×k] · [B×n×k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            let av = View::row_major(&da[i * m * k..(i + 1) * m * k], m, k);
            let bs = &db[i * k * n..(i + 1) * k * n];
            let bv = if transpose_b {
                View::row_major(bs, n, k).t()
            } else {
                View::row_major(bs, k, n)
            };
            gemm(av, bv, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            rg,
            Op::BatchMatMul { a, b, transpose_b },
        ))
    }

    // ---- elementwise -------------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `[…×n]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if self.value(bias).numel() != cols || cols == 0 {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, rg, Op::AddRowBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale { x, factor })
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Unary { kind, x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.abs()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Abs(x))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Max-subtracted softmax along the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if cols == 0 {
            return Err(Error::usage("softmax over an empty last dimension"));
        }
        let mut out = self.data(x).to_vec();
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
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax(x)))
    }

    /// Normalises each last-dimension slice to zero mean and unit variance
    /// (biased variance, `eps` inside the root), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if cols < 2 {
            return Err(Error::usage("layer_norm needs a last dimension of at least 2"));
        }
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout. The identity in [`Mode::Eval`] or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::usage(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    // ---- layout ------------------------------------------------------------

    /// Columns `start..start+len` of a matrix viewed as `[rows × last]`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cols) = self.value(x).rows_cols();
        if start + len > cols || len == 0 {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let data = self
            .data(x)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::SliceCols { x, start }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::usage("concat_cols of nothing"));
        };
        let rows = self.shape(first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// `[batch·seq × heads·hd] → [batch·heads × seq × hd]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != batch * seq || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(Error::dim("split_heads", s, &[batch, seq, heads]));
        }
        let d = s[1];
        let hd = d / heads;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for l in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + l) * d + h * hd;
                    let to = ((b * heads + h) * seq + l) * hd;
                    out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, seq, hd], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            rg,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(Error::dim("merge_heads", s, &[batch, seq, heads]));
        }
        let hd = s[2];
        let d = hd * heads;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for l in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + l) * d + h * hd;
                    let from = ((b * heads + h) * seq + l) * hd;
                    out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            rg,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::dim("gather_rows", s, &[rows.len()]));
        }
        let cols = s[1];
        let src = self.data(x);
        let data = rows
            .iter()
            .flat_map(|&r| src[r * cols..(r + 1) * cols].iter().copied())
            .collect();
        let t = Tensor::new(vec![rows.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            rg,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Averages consecutive groups of `group` rows: `[G·group × d] → [G × d]`.
    pub fn group_mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || group == 0 || !s[0].is_multiple_of(group) {
            return Err(Error::dim("group_mean_rows", s, &[group]));
        }
        let (rows, cols) = (s[0], s[1]);
        let groups = rows / group;
        let src = self.data(x);
        let mut out = vec![0.0; groups * cols];
        for r in 0..rows {
            let g = r / group;
            for c in 0..cols {
                out[g * cols + c] += src[r * cols + c];
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let t = Tensor::new(vec![groups, cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::GroupMeanRows { x, group }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar `loss`, leaving `∂loss/∂node` on every
    /// node that requires a gradient. Contributions from multiple uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].grad, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut self.nodes[v.0].grad, g);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, dy: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let dyv = View::row_major(dy, m, n);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(dyv, View::row_major(self.data(*b), k, n).t(), 0.0, &mut da);
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(View::row_major(self.data(*a), m, k).t(), dyv, 0.0, &mut db);
                    out.push((*b, db));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let mut da = vec![0.0; batch * m * k];
                    for s in 0..batch {
                        let dys = View::row_major(&dy[s * m * n..(s + 1) * m * n], m, n);
                        let bs = &bd[s * k * n..(s + 1) * k * n];
                        // C = A·B ⇒ dA = dC·Bᵀ ; C = A·Bᵀ ⇒ dA = dC·B
                        let bv = if *transpose_b {
                            View::row_major(bs, n, k)
                        } else {
                            View::row_major(bs, k, n).t()
                        };
                        gemm(dys, bv, 0.0, &mut da[s * m * k..(s + 1) * m * k]);
                    }
                    out.push((*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; batch * k * n];
                    for s in 0..batch {
                        let dys = View::row_major(&dy[s * m * n..(s + 1) * m * n], m, n);
                        let av = View::row_major(&ad[s * m * k..(s + 1) * m * k], m, k);
                        let dst = &mut db[s * k * n..(s + 1) * k * n];
                        if *transpose_b {
                            // dB[n×k] = dCᵀ·A
                            gemm(dys.t(), av, 0.0, dst);
                        } else {
                            // dB[k×n] = Aᵀ·dC
                            gemm(av.t(), dys, 0.0, dst);
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.iter().map(|g| -g).collect()));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    out.push((*a, dy.iter().zip(bd).map(|(g, v)| g * v).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, dy.iter().zip(ad).map(|(g, v)| g * v).collect()));
                }
            }
            Op::AddRowBias { x, bias } => {
                out.push((*x, dy.to_vec()));
                if self.needs(*bias) {
                    let cols = self.value(*bias).numel();
                    let mut db = vec![0.0; cols];
                    for row in dy.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Scale { x, factor } => {
                out.push((*x, dy.iter().map(|g| g * factor).collect()));
            }
            Op::Unary { kind, x } => {
                let xd = self.data(*x);
                let dx = dy
                    .iter()
                    .zip(xd.iter().zip(y))
                    .map(|(g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                out.push((*x, dx));
            }
            Op::Abs(x) => {
                let dx = dy
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| {
                        if v > 0.0 {
                            *g
                        } else if v < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Sum(x) => {
                out.push((*x, vec![dy[0]; self.value(*x).numel()]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![dy[0] / n as f64; n]));
            }
            Op::Softmax(x) => {
                let (_, cols) = node.value.rows_cols();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(dy.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dxr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = node.value.rows_cols();
                let g = self.data(*gain);
                if self.needs(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let o = r * cols;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = dy[o + c] * g[c];
                            sum_d += d;
                            sum_dx += d * xhat[o + c];
                        }
                        for c in 0..cols {
                            let d = dy[o + c] * g[c];
                            dx[o + c] = inv_std[r] / nf * (nf * d - sum_d - xhat[o + c] * sum_dx);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += dy[r * cols + c] * xhat[r * cols + c];
                            db[c] += dy[r * cols + c];
                        }
                    }
                    out.push((*gain, dg));
                    out.push((*bias, db));
                }
            }
            Op::Dropout { x, mask } => {
                out.push((*x, dy.iter().zip(mask).map(|(g, m)| g * m).collect()));
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.value(*x).rows_cols();
                let len = node.value.rows_cols().1;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&dy[r * len..(r + 1) * len]);
                }
                out.push((*x, dx));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let d = self.shape(*x)[1];
                let hd = d / heads;
                let mut dx = vec![0.0; dy.len()];
                for b in 0..*batch {
                    for l in 0..*seq {
                        for h in 0..*heads {
                            let to = (b * seq + l) * d + h * hd;
                            let from = ((b * heads + h) * seq + l) * hd;
                            dx[to..to + hd].copy_from_slice(&dy[from..from + hd]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let hd = self.shape(*x)[2];
                let d = hd * heads;
                let mut dx = vec![0.0; dy.len()];
                for b in 0..*batch {
                    for l in 0..*seq {
                        for h in 0..*heads {
                            let from = (b * seq + l) * d + h * hd;
                            let to = ((b * heads + h) * seq + l) * hd;
                            dx[to..to + hd].copy_from_slice(&dy[from..from + hd]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::GatherRows { x, rows } => {
                let cols = node.value.shape()[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (i, &r) in rows.iter().enumerate() {
                    for c in 0..cols {
                        dx[r * cols + c] += dy[i * cols + c];
                    }
                }
                out.push((*x, dx));
            }
            Op::GroupMeanRows { x, group } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![0.0; rows * cols];
                let inv = 1.0 / *group as f64;
                for r in 0..rows {
                    let g = r / group;
                    for c in 0..cols {
                        dx[r * cols + c] = dy[g * cols + c] * inv;
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape(x) => out.push((*x, dy.to_vec())),
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
