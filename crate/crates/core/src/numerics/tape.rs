//! Reverse-mode gradient tape.
//!
//! Operations are recorded in execution order; [`Tape::backward`] replays
//! them in reverse, accumulating adjoints into every node that requires a
//! gradient. Nodes whose inputs are all constants (or stopped) are marked as
//! not requiring gradients and are skipped entirely during the backward pass.
//!
//! Every tensor is treated as a matrix over its last axis where an op needs
//! rows and columns. Shape violations inside the graph are programming errors
//! and panic; validated entry points live one level up.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    StopGrad,
    Reshape(Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f32> },
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<f32> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatCols(Var, Var),
    Sum(Var),
    Mean(Var),
    Mse { a: Var, target: Vec<f32>, weights: Option<Vec<f32>>, total_weight: f64 },
    BceLogits { logits: Var, target: Vec<f32>, weights: Option<Vec<f32>>, total_weight: f64 },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f32>, weights: Option<Vec<f32>>, total_weight: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable_leaf: bool,
}

/// Recorded computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the tape's trainable leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient for `leaf`; zero if the loss does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.grads.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: (&[f32], isize, isize),
    b: (&[f32], isize, isize),
    beta: f32,
    c: (&mut [f32], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(extent(m, k, a.1, a.2) as usize <= a.0.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, b.1, b.2) as usize <= b.0.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, c.1, c.2) as usize <= c.0.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every strided access to the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// `tanh` through a single `exp`; absolute error stays near 1e-7, which is
/// all GELU needs, at a fraction of the libm cost.
fn fast_tanh(u: f32) -> f32 {
    1.0 - 2.0 / (1.0 + (2.0 * u).exp())
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f32) -> f32 {
    let t = fast_tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn weight_total(weights: &Option<Vec<f32>>, n: usize) -> f64 {
    match weights {
        Some(w) => w.iter().map(|&x| x as f64).sum(),
        None => n as f64,
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, trainable_leaf: false });
        Var(self.nodes.len() - 1)
    }

    /// Input tensor; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable, trainable_leaf: trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Identity on values; blocks every gradient flowing back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.nodes.push(Node { value, op: Op::StopGrad, requires_grad: false, trainable_leaf: false });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape).expect("reshape: element count");
        self.push(value, Op::Reshape(x), &[x])
    }

    /// `x[.., k] @ w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (rows, k) = self.value(x).as_matrix_dims();
        let ws = self.shape(w);
        assert!(ws.len() == 2 && ws[0] == k, "matmul: {:?} x {:?}", self.shape(x), ws);
        let n = ws[1];
        let mut out = vec![0.0f32; rows * n];
        gemm(
            rows,
            k,
            n,
            1.0,
            (self.value(x).data(), k as isize, 1),
            (self.value(w).data(), n as isize, 1),
            0.0,
            (&mut out, n as isize, 1),
        );
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out).unwrap();
        self.push(value, Op::MatMul(x, w), &[x, w])
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        va.zip_map(vb, f).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.binary(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds `row[d]` to every row of `x[.., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, d) = self.value(x).as_matrix_dims();
        assert_eq!(self.value(row).numel(), d, "add_row: width mismatch");
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_exact_mut(d) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of `x[.., d]` elementwise by `row[d]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (_, d) = self.value(x).as_matrix_dims();
        assert_eq!(self.value(row).numel(), d, "mul_row: width mismatch");
        let r = self.value(row).data().to_vec();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_exact_mut(d) {
            for (v, g) in chunk.iter_mut().zip(&r) {
                *v *= g;
            }
        }
        self.push(value, Op::MulRow(x, row), &[x, row])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, d) = self.value(x).as_matrix_dims();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_exact_mut(d) {
            softmax_in_place(row);
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (rows, d) = self.value(x).as_matrix_dims();
        let mut value = self.value(x).clone();
        let mut rstd = Vec::with_capacity(rows);
        for row in value.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + EPS).sqrt();
            for v in row.iter_mut() {
                *v = ((*v as f64 - mean) * r) as f32;
            }
            rstd.push(r as f32);
        }
        self.push(value, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]` with each sequence stored
    /// contiguously; heads split the `d` columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (rows, d) = self.value(q).as_matrix_dims();
        assert_eq!(self.shape(q), self.shape(k), "attention: q/k shape");
        assert_eq!(self.shape(q), self.shape(v), "attention: q/v shape");
        assert!(batch > 0 && rows % batch == 0, "attention: rows not divisible by batch");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        let seq = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut out = vec![0.0f32; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    (&qd[off..], d as isize, 1),
                    (&kd[off..], 1, d as isize),
                    0.0,
                    (p, seq as isize, 1),
                );
                for row in p.chunks_exact_mut(seq) {
                    softmax_in_place(row);
                }
                gemm(
                    seq,
                    seq,
                    dh,
                    1.0,
                    (p, seq as isize, 1),
                    (&vd[off..], d as isize, 1),
                    0.0,
                    (&mut out[off..], d as isize, 1),
                );
            }
        }
        let value = Tensor::new(self.shape(q), out).unwrap();
        self.push(value, Op::Attention { q, k, v, batch, heads, probs }, &[q, k, v])
    }

    /// Row gather: `out[r] = x[index[r]]` over the last axis.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let (rows, d) = self.value(x).as_matrix_dims();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            assert!(i < rows, "gather_rows: index {i} out of {rows}");
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[index.len(), d], out).unwrap();
        self.push(value, Op::GatherRows { x, index: index.to_vec() }, &[x])
    }

    /// `[n, d1] ++ [n, d2] -> [n, d1 + d2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, da) = self.value(a).as_matrix_dims();
        let (rb, db) = self.value(b).as_matrix_dims();
        assert_eq!(ra, rb, "concat_cols: row mismatch");
        let (sa, sb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (da + db));
        for r in 0..ra {
            out.extend_from_slice(&sa[r * da..(r + 1) * da]);
            out.extend_from_slice(&sb[r * db..(r + 1) * db]);
        }
        let value = Tensor::new(&[ra, da + db], out).unwrap();
        self.push(value, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum() as f32);
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean() as f32);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Weighted mean squared deviation from a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor, weights: Option<&[f32]>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), target.shape(), "mse: shape mismatch");
        let weights = weights.map(|w| {
            assert_eq!(w.len(), va.numel(), "mse: weight length");
            w.to_vec()
        });
        let total_weight = weight_total(&weights, va.numel());
        let mut acc = 0.0f64;
        for (i, (&x, &t)) in va.data().iter().zip(target.data()).enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[i] as f64);
            acc += w * ((x - t) as f64).powi(2);
        }
        let value = Tensor::scalar((acc / total_weight) as f32);
        let op = Op::Mse { a, target: target.data().to_vec(), weights, total_weight };
        self.push(value, op, &[a])
    }

    /// Weighted binary cross-entropy evaluated from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor, weights: Option<&[f32]>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), target.shape(), "bce: shape mismatch");
        let weights = weights.map(|w| {
            assert_eq!(w.len(), vl.numel(), "bce: weight length");
            w.to_vec()
        });
        let total_weight = weight_total(&weights, vl.numel());
        let mut acc = 0.0f64;
        for (i, (&l, &y)) in vl.data().iter().zip(target.data()).enumerate() {
            let w = weights.as_ref().map_or(1.0, |w| w[i] as f64);
            let (l, y) = (l as f64, y as f64);
            acc += w * (l.max(0.0) - y * l + (-l.abs()).exp().ln_1p());
        }
        let value = Tensor::scalar((acc / total_weight) as f32);
        let op = Op::BceLogits { logits, target: target.data().to_vec(), weights, total_weight };
        self.push(value, op, &[logits])
    }

    /// Weighted categorical cross-entropy; one row of `logits` per label.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[f32]>) -> Var {
        let (rows, k) = self.value(logits).as_matrix_dims();
        assert_eq!(rows, labels.len(), "softmax_cross_entropy: label count");
        let weights = weights.map(|w| {
            assert_eq!(w.len(), rows, "softmax_cross_entropy: weight length");
            w.to_vec()
        });
        let total_weight = weight_total(&weights, rows);
        let mut probs = self.value(logits).data().to_vec();
        let mut acc = 0.0f64;
        for (r, row) in probs.chunks_exact_mut(k).enumerate() {
            assert!(labels[r] < k, "softmax_cross_entropy: label out of range");
            softmax_in_place(row);
            let w = weights.as_ref().map_or(1.0, |w| w[r] as f64);
            acc -= w * (row[labels[r]].max(1e-30) as f64).ln();
        }
        let value = Tensor::scalar((acc / total_weight) as f32);
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, weights, total_weight };
        self.push(value, op, &[logits])
    }

    /// Gradients of the scalar `loss` for every trainable leaf. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        let mut adj: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[loss.0] = Some(vec![1.0]);

        let mut grads = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("adjoint of node {i}")));
            }
            if node.trainable_leaf {
                grads.insert(Var(i), Tensor::new(node.value.shape(), g).unwrap());
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable_leaf {
                grads.entry(Var(i)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients for an explicit set of leaves, in the given order.
    pub fn grad(self, loss: Var, leaves: &[Var]) -> Result<Vec<Tensor>> {
        let shapes: Vec<Vec<usize>> = leaves.iter().map(|&l| self.shape(l).to_vec()).collect();
        let mut grads = self.backward(loss)?;
        Ok(leaves
            .iter()
            .zip(shapes)
            .map(|(&l, s)| grads.take(l).unwrap_or_else(|| Tensor::zeros(&s)))
            .collect())
    }

    fn propagate(&self, i: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        // Adjoint buffer for `v`, created zeroed on first touch.
        fn slot<'a>(adj: &'a mut [Option<Vec<f32>>], v: Var, n: usize) -> &'a mut Vec<f32> {
            adj[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        let numel = |v: Var| self.nodes[v.0].value.numel();
        let out = self.nodes[i].value.data();

        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad => {}
            &Op::Reshape(x) => {
                let s = slot(adj, x, numel(x));
                s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            &Op::MatMul(x, w) => {
                let (rows, k) = self.nodes[x.0].value.as_matrix_dims();
                let n = self.nodes[w.0].value.shape()[1];
                if needs(x) {
                    let s = slot(adj, x, rows * k);
                    gemm(rows, n, k, 1.0, (g, n as isize, 1), (val(w), 1, n as isize), 1.0, (s, k as isize, 1));
                }
                if needs(w) {
                    let s = slot(adj, w, k * n);
                    gemm(k, rows, n, 1.0, (val(x), 1, k as isize), (g, n as isize, 1), 1.0, (s, n as isize, 1));
                }
            }
            &Op::Add(a, b) => {
                for (v, sign) in [(a, 1.0f32), (b, 1.0)] {
                    if needs(v) {
                        let s = slot(adj, v, g.len());
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (v, sign) in [(a, 1.0f32), (b, -1.0)] {
                    if needs(v) {
                        let s = slot(adj, v, g.len());
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    let other = val(b);
                    let s = slot(adj, a, g.len());
                    for ((x, y), o) in s.iter_mut().zip(g).zip(other) {
                        *x += y * o;
                    }
                }
                if needs(b) {
                    let other = val(a);
                    let s = slot(adj, b, g.len());
                    for ((x, y), o) in s.iter_mut().zip(g).zip(other) {
                        *x += y * o;
                    }
                }
            }
            &Op::Scale(a, c) => {
                let s = slot(adj, a, g.len());
                s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            &Op::AddRow(x, row) => {
                let d = numel(row);
                if needs(x) {
                    let s = slot(adj, x, g.len());
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if needs(row) {
                    let s = slot(adj, row, d);
                    for chunk in g.chunks_exact(d) {
                        s.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::MulRow(x, row) => {
                let d = numel(row);
                if needs(x) {
                    let r = val(row);
                    let s = slot(adj, x, g.len());
                    for (sc, gc) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            sc[j] += gc[j] * r[j];
                        }
                    }
                }
                if needs(row) {
                    let xv = val(x);
                    let s = slot(adj, row, d);
                    for (xc, gc) in xv.chunks_exact(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            s[j] += gc[j] * xc[j];
                        }
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let s = slot(adj, x, g.len());
                for ((a, &y), &o) in s.iter_mut().zip(g).zip(out) {
                    *a += y * o * (1.0 - o);
                }
            }
            &Op::Gelu(x) => {
                let xv = val(x);
                let s = slot(adj, x, g.len());
                for ((a, &y), &xi) in s.iter_mut().zip(g).zip(xv) {
                    *a += y * gelu_grad(xi);
                }
            }
            &Op::Softmax(x) => {
                let (_, d) = self.nodes[i].value.as_matrix_dims();
                let s = slot(adj, x, g.len());
                for ((sc, gc), yc) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(out.chunks_exact(d)) {
                    let dot: f32 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        sc[j] += yc[j] * (gc[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (_, d) = self.nodes[i].value.as_matrix_dims();
                let s = slot(adj, *x, g.len());
                for (((sc, gc), yc), &r) in
                    s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(out.chunks_exact(d)).zip(rstd)
                {
                    let mean_g = gc.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let mean_gy = gc.iter().zip(yc).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / d as f64;
                    for j in 0..d {
                        sc[j] += r * (gc[j] - mean_g as f32 - yc[j] * mean_gy as f32);
                    }
                }
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                let (q, k, v, batch, heads) = (*q, *k, *v, *batch, *heads);
                let (rows, d) = self.nodes[q.0].value.as_matrix_dims();
                let seq = rows / batch;
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut dq = needs(q).then(|| adj[q.0].take().unwrap_or_else(|| vec![0.0; rows * d]));
                let mut dk = needs(k).then(|| adj[k.0].take().unwrap_or_else(|| vec![0.0; rows * d]));
                let mut dv = needs(v).then(|| adj[v.0].take().unwrap_or_else(|| vec![0.0; rows * d]));
                let mut dp = vec![0.0f32; seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * d + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        if let Some(dv) = dv.as_mut() {
                            gemm(seq, seq, dh, 1.0, (p, 1, seq as isize), (&g[off..], d as isize, 1), 1.0, (&mut dv[off..], d as isize, 1));
                        }
                        if dq.is_none() && dk.is_none() {
                            continue;
                        }
                        gemm(seq, dh, seq, 1.0, (&g[off..], d as isize, 1), (&vd[off..], 1, d as isize), 0.0, (&mut dp, seq as isize, 1));
                        for (dr, pr) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                            let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot);
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            gemm(seq, seq, dh, scale, (&dp, seq as isize, 1), (&kd[off..], d as isize, 1), 1.0, (&mut dq[off..], d as isize, 1));
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm(seq, seq, dh, scale, (&dp, 1, seq as isize), (&qd[off..], d as isize, 1), 1.0, (&mut dk[off..], d as isize, 1));
                        }
                    }
                }
                // q, k, v may alias; merge back by accumulation.
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(buf) = buf {
                        match adj[var.0].as_mut() {
                            Some(existing) => existing.iter_mut().zip(&buf).for_each(|(a, b)| *a += b),
                            None => adj[var.0] = Some(buf),
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let (rows, d) = self.nodes[x.0].value.as_matrix_dims();
                let s = slot(adj, *x, rows * d);
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..d {
                        s[src * d + j] += g[r * d + j];
                    }
                }
            }
            &Op::ConcatCols(a, b) => {
                let (rows, da) = self.nodes[a.0].value.as_matrix_dims();
                let (_, db) = self.nodes[b.0].value.as_matrix_dims();
                let w = da + db;
                if needs(a) {
                    let s = slot(adj, a, rows * da);
                    for r in 0..rows {
                        for j in 0..da {
                            s[r * da + j] += g[r * w + j];
                        }
                    }
                }
                if needs(b) {
                    let s = slot(adj, b, rows * db);
                    for r in 0..rows {
                        for j in 0..db {
                            s[r * db + j] += g[r * w + da + j];
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                let s = slot(adj, x, numel(x));
                s.iter_mut().for_each(|a| *a += g[0]);
            }
            &Op::Mean(x) => {
                let n = numel(x);
                let s = slot(adj, x, n);
                let c = g[0] / n as f32;
                s.iter_mut().for_each(|a| *a += c);
            }
            Op::Mse { a, target, weights, total_weight } => {
                let av = val(*a);
                let s = slot(adj, *a, av.len());
                let c = 2.0 * g[0] as f64 / total_weight;
                for (j, (x, &t)) in av.iter().zip(target).enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[j] as f64);
                    s[j] += (c * w * (x - t) as f64) as f32;
                }
            }
            Op::BceLogits { logits, target, weights, total_weight } => {
                let lv = val(*logits);
                let s = slot(adj, *logits, lv.len());
                let c = g[0] as f64 / total_weight;
                for (j, (&l, &y)) in lv.iter().zip(target).enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[j] as f64);
                    s[j] += (c * w * (sigmoid(l) - y) as f64) as f32;
                }
            }
            Op::SoftmaxCe { logits, labels, probs, weights, total_weight } => {
                let (_, k) = self.nodes[logits.0].value.as_matrix_dims();
                let s = slot(adj, *logits, probs.len());
                let c = g[0] as f64 / total_weight;
                for (r, (sc, pc)) in s.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                    let w = c * weights.as_ref().map_or(1.0, |w| w[r] as f64);
                    for j in 0..k {
                        let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                        sc[j] += (w * (pc[j] - onehot) as f64) as f32;
                    }
                }
            }
        }
    }
}
