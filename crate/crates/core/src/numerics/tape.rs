//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter through
//! [`Tape::param`], which records the parameter name so that
//! [`Tape::backward`] can report gradients keyed by name. Everything else is
//! a constant leaf or an operation node.

use std::collections::{BTreeMap, BTreeSet};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    /// Source row of every output entry, row-major over the output.
    SegmentMax(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    BceLogits(Var, Vec<f64>),
    BceProbs(Var, Vec<f64>, f64),
    CrossEntropy(Var, Vec<usize>),
    Frobenius(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Vec<Var>>,
}

/// Gradients keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Names of every parameter read by this forward pass.
    pub fn touched_params(&self) -> BTreeSet<String> {
        self.params.keys().cloned().collect()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op,
                detail: format!("non-finite output of shape {:?}", value.shape()),
            });
        }
        self.nodes.push(Node { value, op: node });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf)
    }

    /// Reads a parameter from `store`; gradients flow back to `name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let v = self.push("param", value, Op::Leaf)?;
        self.params.entry(name.to_string()).or_default().push(v);
        Ok(v)
    }

    /// Copies the value of `v` into a new constant leaf. Nothing flows back
    /// through the copy.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.push("matmul_nt", out, Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(shape_err("add", x, y));
        }
        let out = x.zip_map(y, |p, q| p + q);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(shape_err("sub", x, y));
        }
        let out = x.zip_map(y, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(shape_err("mul", x, y));
        }
        let out = x.zip_map(y, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// Adds the `1×c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(shape_err("add_row", x, b));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        self.push("add_row", out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push("abs", out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.push("mean", out, Op::Mean(a))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * x.cols());
        for &i in indices {
            if i >= x.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows index {i} out of range for {} rows",
                    x.rows()
                )));
            }
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::from_vec(indices.len(), x.cols(), data)?;
        self.push("gather_rows", out, Op::GatherRows(a, indices.to_vec()))
    }

    /// Column-wise max over each group of rows. Every group must be
    /// non-empty; ties resolve to the first row listed in the group.
    pub fn segment_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        let mut out = Tensor::zeros(groups.len(), cols);
        let mut argmax = Vec::with_capacity(groups.len() * cols);
        for (g, rows) in groups.iter().enumerate() {
            let Some(&first) = rows.first() else {
                return Err(Error::Contract(format!("segment_max group {g} is empty")));
            };
            for c in 0..cols {
                let mut best = first;
                for &r in rows {
                    if r >= x.rows() {
                        return Err(Error::Contract(format!(
                            "segment_max row {r} out of range for {} rows",
                            x.rows()
                        )));
                    }
                    if x.get(r, c) > x.get(best, c) {
                        best = r;
                    }
                }
                out.set(g, c, x.get(best, c));
                argmax.push(best);
            }
        }
        self.push("segment_max", out, Op::SegmentMax(a, argmax))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), x));
            }
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(shape_err("concat_cols", x, y));
        }
        let cols = x.cols() + y.cols();
        let mut data = Vec::with_capacity(x.rows() * cols);
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Tensor::from_vec(x.rows(), cols, data)?;
        self.push("concat_cols", out, Op::ConcatCols(a, b))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{end} out of range for {} columns",
                x.cols()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Tensor::from_vec(x.rows(), end - start, data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed in the log-sum-exp stable form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: x.shape(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        self.push("bce_with_logits", out, Op::BceLogits(logits, targets.to_vec()))
    }

    /// Mean binary cross-entropy on probabilities, each clamped into
    /// `[clamp, 1 - clamp]` before the logarithm.
    pub fn bce_probs(&mut self, probs: Var, targets: &[f64], clamp: f64) -> Result<Var> {
        let x = self.value(probs);
        if x.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce_probs",
                lhs: x.shape(),
                rhs: vec![targets.len()],
            });
        }
        let total: f64 = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(clamp, 1.0 - clamp);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        self.push("bce_probs", out, Op::BceProbs(probs, targets.to_vec(), clamp))
    }

    /// Mean over rows of softmax cross-entropy against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: x.shape(),
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = x.row(r);
            if label >= row.len() {
                return Err(Error::Contract(format!(
                    "class label {label} out of range for {} logits",
                    row.len()
                )));
            }
            total += log_sum_exp(row) - row[label];
        }
        let out = Tensor::scalar(total / labels.len() as f64);
        self.push("cross_entropy", out, Op::CrossEntropy(logits, labels.to_vec()))
    }

    /// Frobenius norm. The gradient at the origin is taken as zero.
    pub fn frobenius(&mut self, a: Var) -> Result<Var> {
        let norm = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push("frobenius", Tensor::scalar(norm), Op::Frobenius(a))
    }

    /// Reverse sweep from the scalar `loss`. Every parameter of `store`
    /// gets an entry; those the loss does not reach get explicit zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Grads> {
        let node_grads = self.node_grads(loss)?;
        let mut grads = Grads::new();
        for (name, t) in store.iter() {
            let mut g = Tensor::zeros(t.rows(), t.cols());
            if let Some(vars) = self.params.get(name) {
                for v in vars {
                    if let Some(ng) = &node_grads[v.0] {
                        g.add_assign(ng);
                    }
                }
            }
            grads.insert(name.clone(), g);
        }
        Ok(grads)
    }

    /// Gradient of `loss` with respect to a leaf (parameter or constant),
    /// zeros if the leaf does not reach the loss.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let mut node_grads = self.node_grads(loss)?;
        let v = self.value(wrt);
        Ok(node_grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(v.rows(), v.cols())))
    }

    fn node_grads(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, contrib: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_nt(self.value(*b))?);
                    acc(*b, self.value(*a).matmul_tn(&g)?);
                }
                Op::MatMulNt(a, b) => {
                    // out = A Bᵀ: dA = G B, dB = Gᵀ A
                    acc(*a, g.matmul(self.value(*b))?);
                    acc(*b, g.matmul_tn(self.value(*a))?);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|v| -v));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(self.value(*b), |p, q| p * q));
                    acc(*b, g.zip_map(self.value(*a), |p, q| p * q));
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*bias, gb);
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
                Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gv, y| gv * y)),
                Op::Abs(a) => acc(
                    *a,
                    g.zip_map(self.value(*a), |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                ),
                Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                        for c in 0..y.cols() {
                            out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    acc(*a, out);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(*a, Tensor::full(x.rows(), x.cols(), g.item()?));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    acc(*a, Tensor::full(x.rows(), x.cols(), g.item()? / x.len() as f64));
                }
                Op::GatherRows(a, indices) => {
                    let x = self.value(*a);
                    let mut out = Tensor::zeros(x.rows(), x.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, v) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    acc(*a, out);
                }
                Op::SegmentMax(a, argmax) => {
                    let x = self.value(*a);
                    let cols = x.cols();
                    let mut out = Tensor::zeros(x.rows(), cols);
                    for (k, &src) in argmax.iter().enumerate() {
                        let c = k % cols;
                        let v = out.get(src, c) + g.data()[k];
                        out.set(src, c, v);
                    }
                    acc(*a, out);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let x = self.value(*p);
                        let n = x.len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        acc(*p, Tensor::from_vec(x.rows(), x.cols(), slice)?);
                        offset += n;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Vec::with_capacity(g.rows() * ca);
                    let mut gb = Vec::with_capacity(g.rows() * cb);
                    for r in 0..g.rows() {
                        ga.extend_from_slice(&g.row(r)[..ca]);
                        gb.extend_from_slice(&g.row(r)[ca..]);
                    }
                    acc(*a, Tensor::from_vec(g.rows(), ca, ga)?);
                    acc(*b, Tensor::from_vec(g.rows(), cb, gb)?);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut out = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..g.rows() {
                        out.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(*a, out);
                }
                Op::BceLogits(a, targets) => {
                    let x = self.value(*a);
                    let scale = g.item()? / targets.len() as f64;
                    let data = x
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| scale * (sigmoid(z) - t))
                        .collect();
                    acc(*a, Tensor::from_vec(x.rows(), x.cols(), data)?);
                }
                Op::BceProbs(a, targets, clamp) => {
                    let x = self.value(*a);
                    let scale = g.item()? / targets.len() as f64;
                    let data = x
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &t)| {
                            if p < *clamp || p > 1.0 - *clamp {
                                0.0
                            } else {
                                scale * (-(t / p) + (1.0 - t) / (1.0 - p))
                            }
                        })
                        .collect();
                    acc(*a, Tensor::from_vec(x.rows(), x.cols(), data)?);
                }
                Op::CrossEntropy(a, labels) => {
                    let x = self.value(*a);
                    let scale = g.item()? / labels.len() as f64;
                    let mut out = x.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        let row = out.row_mut(r);
                        let lse = log_sum_exp(row);
                        for v in row.iter_mut() {
                            *v = scale * (*v - lse).exp();
                        }
                        row[label] -= scale;
                    }
                    acc(*a, out);
                }
                Op::Frobenius(a) => {
                    let norm = node.value.item()?;
                    let gv = g.item()?;
                    let x = self.value(*a);
                    let out = if norm > 0.0 {
                        x.map(|v| gv * v / norm)
                    } else {
                        Tensor::zeros(x.rows(), x.cols())
                    };
                    acc(*a, out);
                }
            }
        }
        Ok(grads)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t);
        s
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let store = store_with("w.x", Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 9.0]]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w.x").unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads["w.x"], Tensor::ones(2, 3));
    }

    #[test]
    fn grad_of_squared_norm_is_twice_x() {
        let x = Tensor::from_rows(&[[1.5, -2.0, 0.25]]).unwrap();
        let store = store_with("x.v", x.clone());
        let mut tape = Tape::new();
        let v = tape.param(&store, "x.v").unwrap();
        let sq = tape.square(v).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads["x.v"], x.map(|v| 2.0 * v));
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut store = store_with("a.w", Tensor::ones(2, 2));
        store.insert("b.w", Tensor::ones(3, 1));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a.w").unwrap();
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads["b.w"], Tensor::zeros(3, 1));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = store_with("a.w", Tensor::ones(2, 2));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a.w").unwrap();
        assert!(matches!(tape.backward(a, &store), Err(Error::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let store = store_with("a.w", Tensor::ones(1, 2));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a.w").unwrap();
        let d = tape.detach(a).unwrap();
        let loss = tape.sum(d).unwrap();
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads["a.w"], Tensor::zeros(1, 2));
    }

    #[test]
    fn frobenius_of_identical_inputs_has_zero_grad() {
        let store = store_with("a.w", Tensor::ones(2, 2));
        let mut tape = Tape::new();
        let a = tape.param(&store, "a.w").unwrap();
        let b = tape.constant(Tensor::ones(2, 2)).unwrap();
        let diff = tape.sub(a, b).unwrap();
        let loss = tape.frobenius(diff).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 0.0);
        let grads = tape.backward(loss, &store).unwrap();
        assert_eq!(grads["a.w"], Tensor::zeros(2, 2));
    }

    #[test]
    fn non_finite_forward_is_a_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(a), Err(Error::Numeric { .. })));
    }

    #[test]
    fn repeated_param_reads_accumulate() {
        let store = store_with("a.w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let a1 = tape.param(&store, "a.w").unwrap();
        let a2 = tape.param(&store, "a.w").unwrap();
        let p = tape.mul(a1, a2).unwrap();
        let grads = tape.backward(p, &store).unwrap();
        assert_eq!(grads["a.w"], Tensor::scalar(6.0));
    }
}
