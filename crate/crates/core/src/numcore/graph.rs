//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order; [`Var`] is an index
//! into that record. Nodes only ever reference earlier nodes, so a single
//! reverse sweep over the tape is a valid topological traversal.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SqRelu(Var),
    Silu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    L2NormalizeRows(Var, Vec<f64>),
    Reshape(Var),
    Slice {
        src: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::SqRelu(..) => "sq_relu",
            Op::Silu(..) => "silu",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::PickPerRow(..) => "pick_per_row",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitives.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| Error::shape(op, t.shape(), &[]))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`]; `None` for nodes
    /// that do not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push_op(value, op, &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push_op(value, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |p, q| p * q)
    }

    fn row_broadcast(
        &mut self,
        op: Op,
        a: Var,
        v: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let name = op.name();
        let (r, c) = dims2(name, self.value(a))?;
        if self.value(v).len() != c {
            return Err(Error::shape(name, self.shape(a), self.shape(v)));
        }
        let (x, vv) = (self.value(a).data(), self.value(v).data());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(f(x[i * c + j], vv[j]));
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, op, &[a, v]))
    }

    /// `a + v` with `v` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.row_broadcast(Op::AddRow(a, v), a, v, |p, q| p + q)
    }

    /// `a * v` with `v` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        self.row_broadcast(Op::MulRow(a, v), a, v, |p, q| p * q)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::domain("sqrt", format!("negative input {bad}")));
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `relu(x)^2`.
    pub fn sq_relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::SqRelu(a), |x| {
            let r = x.max(0.0);
            r * r
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("softmax_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                s += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= s;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push_op(value, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("log_softmax_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push_op(value, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2("layer_norm_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * is;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push_op(value, Op::LayerNormRows(a, inv_std), &[a]))
    }

    /// Rows divided by `max(norm, floor)`.
    pub fn l2_normalize_rows(&mut self, a: Var, floor: f64) -> Result<Var> {
        let (r, c) = dims2("l2_normalize_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push_op(value, Op::L2NormalizeRows(a, norms), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    /// Sub-matrix `[r0, r1) x [c0, c1)`.
    pub fn slice(&mut self, a: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (r, c) = dims2("slice", self.value(a))?;
        if rows.0 >= rows.1 || rows.1 > r || cols.0 >= cols.1 || cols.1 > c {
            return Err(Error::shape(
                "slice",
                self.shape(a),
                &[rows.0, rows.1, cols.0, cols.1],
            ));
        }
        let x = self.value(a).data();
        let w = cols.1 - cols.0;
        let mut out = Vec::with_capacity((rows.1 - rows.0) * w);
        for i in rows.0..rows.1 {
            out.extend_from_slice(&x[i * c + cols.0..i * c + cols.1]);
        }
        let value = Tensor::matrix(rows.1 - rows.0, w, out)?;
        Ok(self.push_op(value, Op::Slice { src: a, rows, cols }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, c) = dims2("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = dims2("concat_rows", self.value(p))?;
            if pc != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, c, data)?;
        Ok(self.push_op(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (r, _) = dims2("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(r, total, data)?;
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        dims2("transpose", self.value(a))?;
        let value = self.value(a).transpose();
        Ok(self.push_op(value, Op::Transpose(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op(value, Op::Mean(a), &[a])
    }

    /// Column means, `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("mean_rows", self.value(a))?;
        let x = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += x[i * c + j];
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push_op(Tensor::row(out), Op::MeanRows(a), &[a]))
    }

    /// Row lookup (embedding table).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2("gather_rows", self.value(a))?;
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(a), &[bad]));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push_op(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Element `idx[i]` of each row `i`, as a `1 x rows` vector.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2("pick_per_row", self.value(a))?;
        if idx.len() != r {
            return Err(Error::shape("pick_per_row", self.shape(a), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::shape("pick_per_row", self.shape(a), &[bad]));
        }
        let x = self.value(a).data();
        let data = idx.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect();
        Ok(self.push_op(Tensor::row(data), Op::PickPerRow(a, idx.to_vec()), &[a]))
    }

    /// Reverse sweep from a scalar `output`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::domain(
                "backward",
                format!("output must be scalar, got shape {:?}", self.shape(output)),
            ));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
        }
        Ok(())
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    let each = |grads: &mut [Option<Vec<f64>>], a: Var, f: &dyn Fn(usize) -> f64| {
        if let Some(ga) = acc(nodes, grads, a) {
            for (k, gk) in ga.iter_mut().enumerate() {
                *gk += f(k);
            }
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2().unwrap();
            let (_, n) = nodes[b.0].value.dims2().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                // dA = dC * B^T
                gemm(m, n, k, g, false, val(*b), true, ga, 1.0);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                // dB = A^T * dC
                gemm(k, m, n, val(*a), true, g, false, gb, 1.0);
            }
        }
        Op::Add(a, b) => {
            each(grads, *a, &|k| g[k]);
            each(grads, *b, &|k| g[k]);
        }
        Op::Sub(a, b) => {
            each(grads, *a, &|k| g[k]);
            each(grads, *b, &|k| -g[k]);
        }
        Op::Mul(a, b) => {
            let (x, z) = (val(*a), val(*b));
            each(grads, *a, &|k| g[k] * z[k]);
            each(grads, *b, &|k| g[k] * x[k]);
        }
        Op::AddRow(a, v) => {
            let c = nodes[v.0].value.len();
            each(grads, *a, &|k| g[k]);
            if let Some(gv) = acc(nodes, grads, *v) {
                for (k, gk) in g.iter().enumerate() {
                    gv[k % c] += gk;
                }
            }
        }
        Op::MulRow(a, v) => {
            let c = nodes[v.0].value.len();
            let (x, vv) = (val(*a), val(*v));
            each(grads, *a, &|k| g[k] * vv[k % c]);
            if let Some(gv) = acc(nodes, grads, *v) {
                for (k, gk) in g.iter().enumerate() {
                    gv[k % c] += gk * x[k];
                }
            }
        }
        Op::Scale(a, s) => each(grads, *a, &|k| s * g[k]),
        Op::AddScalar(a) | Op::Reshape(a) => each(grads, *a, &|k| g[k]),
        Op::Exp(a) => each(grads, *a, &|k| g[k] * y[k]),
        Op::Log(a) => {
            let x = val(*a);
            each(grads, *a, &|k| g[k] / x[k]);
        }
        Op::Sqrt(a) => each(grads, *a, &|k| g[k] * 0.5 / y[k]),
        Op::Sigmoid(a) => each(grads, *a, &|k| g[k] * y[k] * (1.0 - y[k])),
        Op::Tanh(a) => each(grads, *a, &|k| g[k] * (1.0 - y[k] * y[k])),
        Op::Relu(a) => {
            let x = val(*a);
            each(grads, *a, &|k| if x[k] > 0.0 { g[k] } else { 0.0 });
        }
        Op::SqRelu(a) => {
            let x = val(*a);
            each(grads, *a, &|k| 2.0 * x[k].max(0.0) * g[k]);
        }
        Op::Silu(a) => {
            let x = val(*a);
            each(grads, *a, &|k| {
                let s = sigmoid(x[k]);
                g[k] * s * (1.0 + x[k] * (1.0 - s))
            });
        }
        Op::Gelu(a) => {
            let x = val(*a);
            each(grads, *a, &|k| {
                let xx = x[k];
                let u = GELU_C * (xx + 0.044715 * xx * xx * xx);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * xx * xx);
                g[k] * (0.5 * (1.0 + t) + 0.5 * xx * (1.0 - t * t) * du)
            });
        }
        Op::SoftmaxRows(a) => {
            let (r, c) = node.value.dims2().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for row in 0..r {
                    let s = row * c;
                    let dot: f64 = (s..s + c).map(|k| g[k] * y[k]).sum();
                    for k in s..s + c {
                        ga[k] += y[k] * (g[k] - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(a) => {
            let (r, c) = node.value.dims2().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for row in 0..r {
                    let s = row * c;
                    let gs: f64 = g[s..s + c].iter().sum();
                    for k in s..s + c {
                        ga[k] += g[k] - y[k].exp() * gs;
                    }
                }
            }
        }
        Op::LayerNormRows(a, inv_std) => {
            let (r, c) = node.value.dims2().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (row, &is) in inv_std.iter().enumerate().take(r) {
                    let s = row * c;
                    let gm: f64 = g[s..s + c].iter().sum::<f64>() / c as f64;
                    let gy: f64 = (s..s + c).map(|k| g[k] * y[k]).sum::<f64>() / c as f64;
                    for k in s..s + c {
                        ga[k] += is * (g[k] - gm - y[k] * gy);
                    }
                }
            }
        }
        Op::L2NormalizeRows(a, norms) => {
            let (r, c) = node.value.dims2().unwrap();
            let x = val(*a);
            if let Some(ga) = acc(nodes, grads, *a) {
                for (row, &n) in norms.iter().enumerate().take(r) {
                    let s = row * c;
                    let raw = x[s..s + c].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw >= n {
                        let gy: f64 = (s..s + c).map(|k| g[k] * y[k]).sum();
                        for k in s..s + c {
                            ga[k] += (g[k] - y[k] * gy) / n;
                        }
                    } else {
                        for k in s..s + c {
                            ga[k] += g[k] / n;
                        }
                    }
                }
            }
        }
        Op::Slice { src, rows, cols } => {
            let (_, c) = nodes[src.0].value.dims2().unwrap();
            let w = cols.1 - cols.0;
            if let Some(ga) = acc(nodes, grads, *src) {
                for (ri, i) in (rows.0..rows.1).enumerate() {
                    for j in 0..w {
                        ga[i * c + cols.0 + j] += g[ri * w + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(gp) = acc(nodes, grads, *p) {
                    for k in 0..n {
                        gp[k] += g[off + k];
                    }
                }
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = node.value.dims2().unwrap();
            let mut off = 0;
            for p in parts {
                let (_, w) = nodes[p.0].value.dims2().unwrap();
                if let Some(gp) = acc(nodes, grads, *p) {
                    for i in 0..r {
                        for j in 0..w {
                            gp[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Transpose(a) => {
            let (r, c) = nodes[a.0].value.dims2().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Sum(a) => each(grads, *a, &|_| g[0]),
        Op::Mean(a) => {
            let n = nodes[a.0].value.len() as f64;
            each(grads, *a, &|_| g[0] / n);
        }
        Op::MeanRows(a) => {
            let (r, c) = nodes[a.0].value.dims2().unwrap();
            each(grads, *a, &|k| g[k % c] / r as f64);
        }
        Op::GatherRows(a, idx) => {
            let (_, c) = nodes[a.0].value.dims2().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (row, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g[row * c + j];
                    }
                }
            }
        }
        Op::PickPerRow(a, idx) => {
            let (_, c) = nodes[a.0].value.dims2().unwrap();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (row, &j) in idx.iter().enumerate() {
                    ga[row * c + j] += g[row];
                }
            }
        }
    }
}

/// Builds a graph with `f` and returns the output value alongside the graph.
pub fn evaluate<F>(f: F) -> Result<(Tensor, Graph)>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok((g.value(out).clone(), g))
}
