//! Tape-based reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order. [`Graph::backward`] walks the tape in reverse and returns
//! gradients keyed by parameter id. Only leaves added with
//! [`Graph::param`] receive gradients; [`Graph::constant`] leaves are
//! frozen and never appear in the result.
//!
//! The operation set is exactly what the mixture-of-experts forward pass
//! needs: matmul, add, scale, elementwise product, SiLU, row softmax,
//! top-k renormalization, row gather/scatter, gate scaling and the two
//! scalar losses.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

pub type Gradients<T, K> = BTreeMap<K, Matrix<T>>;

#[derive(Debug)]
enum Op<T, K> {
    Constant,
    Param(K),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Hadamard(NodeId, NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    TopKRenorm {
        input: NodeId,
        active: Vec<Vec<usize>>,
    },
    GatherRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    GateRows {
        input: NodeId,
        gates: NodeId,
        rows: Vec<usize>,
        col: usize,
    },
    ScatterAddRows {
        base: NodeId,
        src: NodeId,
        rows: Vec<usize>,
    },
    Sum(NodeId),
    Mse {
        pred: NodeId,
        target: Matrix<T>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
}

#[derive(Debug)]
struct Node<T, K> {
    value: Matrix<T>,
    op: Op<T, K>,
    requires_grad: bool,
}

/// One recorded forward pass. Owned by a single thread.
#[derive(Debug)]
pub struct Graph<T, K> {
    nodes: Vec<Node<T, K>>,
}

impl<T: Scalar, K: Ord + Clone> Default for Graph<T, K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar, K: Ord + Clone> Graph<T, K> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T, K>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Trainable leaf; its gradient is reported under `key`.
    pub fn param(&mut self, key: K, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Param(key), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let value = self.value(a).scale(factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    /// `x · sigmoid(x)` elementwise.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).softmax_rows()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Keeps, per row, only the columns listed in `active[row]`, rescaled so
    /// they sum to one. All other entries become zero.
    pub fn top_k_renorm(&mut self, a: NodeId, active: Vec<Vec<usize>>) -> Result<NodeId> {
        let input = self.value(a);
        if active.len() != input.rows() {
            return Err(Error::Contract("top-k index list per row".into()));
        }
        let mut value = Matrix::zeros(input.rows(), input.cols());
        for (r, cols) in active.iter().enumerate() {
            let total = cols.iter().fold(T::zero(), |acc, &c| acc + input.get(r, c));
            for &c in cols {
                value.set(r, c, input.get(r, c) / total);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::TopKRenorm { input: a, active }, rg))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> NodeId {
        let value = self.value(a).gather_rows(&rows);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows { input: a, rows }, rg)
    }

    /// Scales row `r` of `a` by `gates[rows[r], col]`.
    pub fn gate_rows(&mut self, a: NodeId, gates: NodeId, rows: Vec<usize>, col: usize) -> Result<NodeId> {
        let x = self.value(a);
        let g = self.value(gates);
        if rows.len() != x.rows() {
            return Err(Error::Contract("gate_rows row count".into()));
        }
        let mut value = x.clone();
        for (r, &src) in rows.iter().enumerate() {
            let factor = g.get(src, col);
            for v in value.row_mut(r) {
                *v = *v * factor;
            }
        }
        let rg = self.rg(a) || self.rg(gates);
        Ok(self.push(
            value,
            Op::GateRows {
                input: a,
                gates,
                rows,
                col,
            },
            rg,
        ))
    }

    /// `base` with row `r` of `src` added into row `rows[r]`.
    pub fn scatter_add_rows(&mut self, base: NodeId, src: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let s = self.value(src);
        let mut value = self.value(base).clone();
        if s.cols() != value.cols() || rows.len() != s.rows() {
            return Err(Error::Contract("scatter_add_rows shape".into()));
        }
        for (r, &dst) in rows.iter().enumerate() {
            for (o, &v) in value.row_mut(dst).iter_mut().zip(s.row(r)) {
                *o = *o + v;
            }
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(value, Op::ScatterAddRows { base, src, rows }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    /// Mean squared error over every entry.
    pub fn mse(&mut self, pred: NodeId, target: Matrix<T>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Contract("mse target shape".into()));
        }
        let count = T::from_f64(p.len() as f64);
        let total = p
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let value = Matrix::filled(1, 1, total / count);
        let rg = self.rg(pred);
        Ok(self.push(value, Op::Mse { pred, target }, rg))
    }

    /// Mean softmax cross-entropy of `logits` rows against class `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let l = self.value(logits);
        if labels.len() != l.rows() || labels.iter().any(|&c| c >= l.cols()) {
            return Err(Error::Contract("cross_entropy labels".into()));
        }
        let probs = l.softmax_rows()?;
        let mut total = T::zero();
        for (r, &c) in labels.iter().enumerate() {
            let row = l.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
            total = total + (lse - row[c]);
        }
        let value = Matrix::filled(1, 1, total / T::from_f64(labels.len() as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a 1x1 `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T, K>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => {
                    match out.get_mut(key) {
                        Some(acc) => Matrix::add_assign(acc, &g),
                        None => {
                            out.insert(key.clone(), g);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_transposed(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).transposed_matmul(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scale(*factor)),
                Op::Hadamard(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.hadamard(self.value(*b))?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.hadamard(self.value(*a))?);
                    }
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (d, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                        let s = sigmoid(xv);
                        *d = *d * s * (T::one() + xv * (T::one() - s));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot = ga
                            .row(r)
                            .iter()
                            .zip(yr)
                            .fold(T::zero(), |acc, (&d, &v)| acc + d * v);
                        for (d, &v) in ga.row_mut(r).iter_mut().zip(yr) {
                            *d = v * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::TopKRenorm { input, active } => {
                    let x = self.value(*input);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for (r, cols) in active.iter().enumerate() {
                        let total = cols.iter().fold(T::zero(), |acc, &c| acc + x.get(r, c));
                        let dot = cols
                            .iter()
                            .fold(T::zero(), |acc, &c| acc + g.get(r, c) * y.get(r, c));
                        for &c in cols {
                            ga.set(r, c, (g.get(r, c) - dot) / total);
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::GatherRows { input, rows } => {
                    let x = self.value(*input);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for (r, &src) in rows.iter().enumerate() {
                        for (o, &v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
                Op::GateRows {
                    input,
                    gates,
                    rows,
                    col,
                } => {
                    let x = self.value(*input);
                    let gv = self.value(*gates);
                    if self.rg(*input) {
                        let mut ga = g.clone();
                        for (r, &src) in rows.iter().enumerate() {
                            let factor = gv.get(src, *col);
                            for v in ga.row_mut(r) {
                                *v = *v * factor;
                            }
                        }
                        accumulate(&mut grads, *input, ga);
                    }
                    if self.rg(*gates) {
                        let mut gg = Matrix::zeros(gv.rows(), gv.cols());
                        for (r, &src) in rows.iter().enumerate() {
                            let dot = g
                                .row(r)
                                .iter()
                                .zip(x.row(r))
                                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                            gg.set(src, *col, gg.get(src, *col) + dot);
                        }
                        accumulate(&mut grads, *gates, gg);
                    }
                }
                Op::ScatterAddRows { base, src, rows } => {
                    if self.rg(*src) {
                        accumulate(&mut grads, *src, g.gather_rows(rows));
                    }
                    if self.rg(*base) {
                        accumulate(&mut grads, *base, g);
                    }
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::filled(x.rows(), x.cols(), g.get(0, 0)));
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let factor = g.get(0, 0) * T::from_f64(2.0 / p.len() as f64);
                    let gp = Matrix::new(
                        p.rows(),
                        p.cols(),
                        p.data()
                            .iter()
                            .zip(target.data())
                            .map(|(&a, &b)| (a - b) * factor)
                            .collect(),
                    )?;
                    accumulate(&mut grads, *pred, gp);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let factor = g.get(0, 0) / T::from_f64(labels.len() as f64);
                    let mut gl = probs.clone();
                    for (r, &c) in labels.iter().enumerate() {
                        gl.set(r, c, gl.get(r, c) - T::one());
                    }
                    accumulate(&mut grads, *logits, gl.scale(factor));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
