//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass as an append-only
//! list of nodes. Node ids are dense and already in topological order, so
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves are either parameters ([`Tape::param`], gradients are tracked) or
//! constants ([`Tape::constant`]). A node requires a gradient iff one of its
//! inputs does.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor below which cosine similarity and normalization refuse to run.
pub const NORM_EPS: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "tensor",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: n,
            cols: m,
            data: out,
        })
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Little-endian byte image of the entries, row-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Handle to a node on a [`Tape`].
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
    MatMulFrozen(Var, Arc<Tensor>),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Tanh(Var),
    Sum(Var),
    MeanRows(Var),
    L2NormalizeRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ReplaceRows { base: Var, start: usize, rows: Var },
    RowSoftmax(Var, f64),
    RowLogSoftmax(Var, f64),
    CosineSim(Var, Var),
    Select(Var, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Returns the gradient for `v`, consuming the slot.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node; previously issued [`Var`]s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a * w` where `w` is a frozen matrix that never receives a gradient.
    pub fn matmul_frozen(&mut self, a: Var, w: &Arc<Tensor>) -> Result<Var> {
        let value = self.value(a).matmul(w)?;
        self.push("matmul", value, Op::MatMulFrozen(a, Arc::clone(w)), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push("transpose", value, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::Parameter(format!("scale factor {factor} is not finite")));
        }
        let value = self.value(a).map(|x| x * factor);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::row_vector(vec![self.value(a).sum()]);
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// Column-wise mean over rows: T x d -> 1 x d.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(Error::Contract("mean_rows of an empty tensor".into()));
        }
        let n = t.rows() as f64;
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        self.push("mean_rows", Tensor::row_vector(out), Op::MeanRows(a), &[a])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let norms = row_norms(t);
        if norms.iter().any(|&n| n < NORM_EPS) {
            return Err(Error::DegenerateVector {
                op: "l2_normalize_rows",
            });
        }
        let mut value = t.clone();
        let cols = t.cols();
        for (r, n) in norms.iter().enumerate() {
            value.data[r * cols..(r + 1) * cols]
                .iter_mut()
                .for_each(|v| *v /= n);
        }
        self.push("l2_normalize_rows", value, Op::L2NormalizeRows(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.value(first).shape(),
                    right: t.shape(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor { rows, cols, data };
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: t.shape(),
                right: (start + len, t.cols()),
            });
        }
        let cols = t.cols();
        let value = Tensor {
            rows: len,
            cols,
            data: t.data[start * cols..(start + len) * cols].to_vec(),
        };
        self.push("slice_rows", value, Op::SliceRows(a, start), &[a])
    }

    /// Overwrites rows `start..start + rows.rows()` of `base` with `rows`.
    ///
    /// Only the replacement rows pass gradient back to `rows`; the overwritten
    /// rows of `base` receive zero.
    pub fn replace_rows(&mut self, base: Var, start: usize, rows: Var) -> Result<Var> {
        let (b, r) = (self.value(base), self.value(rows));
        if b.cols() != r.cols() || start + r.rows() > b.rows() {
            return Err(Error::Dimension {
                op: "replace_rows",
                left: b.shape(),
                right: (start + r.rows(), r.cols()),
            });
        }
        let cols = b.cols();
        let mut value = b.clone();
        value.data[start * cols..(start + r.rows()) * cols].copy_from_slice(r.data());
        self.push(
            "replace_rows",
            value,
            Op::ReplaceRows { base, start, rows },
            &[base, rows],
        )
    }

    fn check_temperature(temperature: f64) -> Result<()> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(())
    }

    /// Softmax of `a / temperature` along each row, with max subtraction.
    pub fn row_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let t = self.value(a);
        let mut value = t.clone();
        let cols = t.cols();
        for r in 0..t.rows() {
            let row = &mut value.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / temperature).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push("row_softmax", value, Op::RowSoftmax(a, temperature), &[a])
    }

    /// Log-softmax of `a / temperature` along each row.
    pub fn row_log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        Self::check_temperature(temperature)?;
        let t = self.value(a);
        let mut value = t.clone();
        let cols = t.cols();
        for r in 0..t.rows() {
            let row = &mut value.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            row.iter_mut().for_each(|v| *v = (*v - max) / temperature - lse);
        }
        self.push(
            "row_log_softmax",
            value,
            Op::RowLogSoftmax(a, temperature),
            &[a],
        )
    }

    /// Cosine similarity of two row vectors as a 1x1 node.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != 1 || ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: "cosine_sim",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let (na, nb) = (ta.norm(), tb.norm());
        if na < NORM_EPS || nb < NORM_EPS {
            return Err(Error::DegenerateVector { op: "cosine_sim" });
        }
        let s = dot(ta.data(), tb.data()) / (na * nb);
        self.push(
            "cosine_sim",
            Tensor::row_vector(vec![s]),
            Op::CosineSim(a, b),
            &[a, b],
        )
    }

    /// Entry `(r, c)` as a 1x1 node.
    pub fn select(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let t = self.value(a);
        if r >= t.rows() || c >= t.cols() {
            return Err(Error::Dimension {
                op: "select",
                left: t.shape(),
                right: (r + 1, c + 1),
            });
        }
        let value = Tensor::row_vector(vec![t.get(r, c)]);
        self.push("select", value, Op::Select(a, r, c), &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires a gradient receives one (zeros when `loss`
    /// does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                let (r, c) = node.value.shape();
                grads[id] = Some(Tensor::zeros(r, c));
            } else if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let ga = g.matmul(&tb.transpose()).expect("matmul grad shape");
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = ta.transpose().matmul(g).expect("matmul grad shape");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulFrozen(a, w) => {
                let ga = g.matmul(&w.transpose()).expect("matmul grad shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|x| x * f)),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * y)),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Tensor::filled(r, c, g.get(0, 0)));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    for col in 0..c {
                        ga.data[row * c + col] = g.data[col] / r as f64;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a) => {
                let ta = self.value(*a);
                let norms = row_norms(ta);
                let cols = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), cols);
                for (r, n) in norms.iter().enumerate() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let proj = dot(y, gr);
                    for c in 0..cols {
                        ga.data[r * cols + c] = (gr[c] - y[c] * proj) / n;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let cols = out.cols();
                let mut offset = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    let part = Tensor {
                        rows,
                        cols,
                        data: g.data[offset * cols..(offset + rows) * cols].to_vec(),
                    };
                    self.accumulate(grads, *p, part);
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), cols);
                ga.data[start * cols..start * cols + g.data.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, ga);
            }
            Op::ReplaceRows { base, start, rows } => {
                let cols = out.cols();
                let n = self.value(*rows).rows();
                let range = start * cols..(start + n) * cols;
                if self.requires_grad(*base) {
                    let mut gb = g.clone();
                    gb.data[range.clone()].iter_mut().for_each(|v| *v = 0.0);
                    self.accumulate(grads, *base, gb);
                }
                let gr = Tensor {
                    rows: n,
                    cols,
                    data: g.data[range].to_vec(),
                };
                self.accumulate(grads, *rows, gr);
            }
            Op::RowSoftmax(a, temperature) => {
                let cols = out.cols();
                let mut ga = Tensor::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let inner = dot(y, gr);
                    for c in 0..cols {
                        ga.data[r * cols + c] = y[c] * (gr[c] - inner) / temperature;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowLogSoftmax(a, temperature) => {
                let cols = out.cols();
                let mut ga = Tensor::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for c in 0..cols {
                        ga.data[r * cols + c] = (gr[c] - y[c].exp() * total) / temperature;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::CosineSim(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (na, nb) = (ta.norm(), tb.norm());
                let s = out.get(0, 0);
                let up = g.get(0, 0);
                if self.requires_grad(*a) {
                    let ga = ta.zip_map(tb, |x, y| up * (y / (na * nb) - s * x / (na * na)));
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = tb.zip_map(ta, |y, x| up * (x / (na * nb) - s * y / (nb * nb)));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Select(a, r, c) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                ga.data[r * ta.cols() + c] = g.get(0, 0);
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
