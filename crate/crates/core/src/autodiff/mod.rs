//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to tensors that (transitively) depend
//! on a gradient-requiring leaf. [`Tape::backward`] consumes the tape and
//! replays it in reverse, returning gradients for those leaves. Nodes are
//! appended in creation order, so the reverse index order is a valid
//! reverse-topological order and every node is visited once.

pub mod attention;
pub mod gradcheck;
pub mod suite;
pub mod kernels;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};
use attention::AttnDims;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const CE_EPS: f64 = 1e-12;
pub const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanPool {
        x: Var,
        group: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropyProbs {
        p: Var,
        target: Vec<T>,
    },
    CrossEntropyLogits {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    CosineRows {
        a: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape; one per forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records backward information; parameters bound to
    /// it are constants. Used for teacher forwards and inference.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a named parameter. Repeated binds of the same name return the
    /// same leaf so gradients accumulate across uses.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?
            .clone();
        let v = self.leaf(value, store.is_trainable(name));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid(op, format!("expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ---------------------------------------------------------------- ops

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// `a (m×n) + row (n)`, broadcast over rows. Bias addition.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix("add_row", a)?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let src = self.value(a).data();
        let data = (0..m * n).map(|i| src[i] + r[i % n]).collect();
        let out = Tensor::new([m, n], data)?;
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// `a (m×n) ⊙ row (n)`, broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix("mul_row", a)?;
        if self.value(row).len() != n {
            return Err(Error::shape("mul_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let src = self.value(a).data();
        let data = (0..m * n).map(|i| src[i] * r[i % n]).collect();
        let out = Tensor::new([m, n], data)?;
        self.push("mul_row", out, Op::MulRow(a, row), &[a, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new([m, n], data)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix("transpose", a)?;
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::gelu);
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(kernels::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            kernels::softmax_row(x.row(i), &mut data[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.matrix("layer_norm", x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nn = T::of(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let is = T::one() / (var + T::of(LN_EPS)).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                data[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new([m, n], data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean over consecutive groups of `group` rows: `(g·group)×d → g×d`.
    /// With `group == rows` this is the mean over axis 0.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.matrix("mean_pool", x)?;
        if group == 0 || m % group != 0 {
            return Err(Error::invalid("mean_pool", format!("{m} rows not divisible by group {group}")));
        }
        let groups = m / group;
        let src = self.value(x).data();
        let inv = T::of(1.0 / group as f64);
        let mut data = vec![T::zero(); groups * n];
        for i in 0..m {
            let dst = &mut data[(i / group) * n..(i / group + 1) * n];
            for (o, &v) in dst.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o = *o + v;
            }
        }
        for o in data.iter_mut() {
            *o = *o * inv;
        }
        let out = Tensor::new([groups, n], data)?;
        self.push("mean_pool", out, Op::MeanPool { x, group }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no inputs"));
        }
        let (m, _) = self.matrix("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.matrix("concat_cols", p)?;
            if pm != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new([m, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no inputs"));
        }
        let (_, n) = self.matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.matrix("concat_rows", p)?;
            if pn != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new([rows, n], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix("slice_cols", x)?;
        if start + len > n || len == 0 {
            return Err(Error::invalid("slice_cols", format!("[{start}, {}) out of {n} columns", start + len)));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let out = Tensor::new([m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    /// Select rows by index (repeats allowed). Also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, _) = self.matrix("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of {m}")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        let out = self.value(x).select_rows(idx);
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::of(v.len() as f64));
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(total / T::of(av.len() as f64));
        self.push("mse", out, Op::Mse(a, b), &[a, b])
    }

    /// `−mean_rows Σ_j target·ln(max(p, ε))` for probability rows `p`.
    pub fn cross_entropy_probs(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::shape("cross_entropy_probs", self.shape(p), target.shape()));
        }
        let pv = self.value(p);
        let eps = T::of(CE_EPS);
        let rows = T::of(pv.rows() as f64);
        let total: T = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&q, &t)| if t == T::zero() { T::zero() } else { -t * q.max(eps).ln() })
            .sum();
        let out = Tensor::scalar(total / rows);
        self.push(
            "cross_entropy_probs",
            out,
            Op::CrossEntropyProbs {
                p,
                target: target.data().to_vec(),
            },
            &[p],
        )
    }

    /// Mean cross-entropy of logit rows against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix("cross_entropy_logits", logits)?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy_logits", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::invalid("cross_entropy_logits", format!("label {bad} >= {n} classes")));
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for i in 0..m {
            let row = x.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + lse - row[labels[i]];
            kernels::softmax_row(row, &mut probs[i * n..(i + 1) * n]);
        }
        let out = Tensor::scalar(total / T::of(m as f64));
        self.push(
            "cross_entropy_logits",
            out,
            Op::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Row-wise cosine similarity: `m×n, m×n → m×1`. Zero-norm rows are an
    /// error, never clamped.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (m, _) = self.matrix("cosine", a)?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let (x, y) = (av.row(i), bv.row(i));
            let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
            let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
            if nx == T::zero() || ny == T::zero() {
                return Err(Error::ZeroNorm { op: "cosine" });
            }
            let dot = x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
            data.push(dot / (nx * ny));
        }
        let out = Tensor::new([m, 1], data)?;
        self.push("cosine", out, Op::CosineRows { a, b }, &[a, b])
    }

    /// Multi-head scaled dot-product attention core. `q` is
    /// `(batch·q_len)×d`; `k`, `v` are `(batch·k_len)×d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, q_len: usize, k_len: usize) -> Result<Var> {
        let (qm, d) = self.matrix("attention", q)?;
        let (km, kd) = self.matrix("attention", k)?;
        self.same_shape("attention", k, v)?;
        if kd != d {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if q_len == 0 || k_len == 0 || qm % q_len != 0 || km % k_len != 0 || qm / q_len != km / k_len {
            return Err(Error::invalid(
                "attention",
                format!("rows {qm}/{km} do not split into sequences of {q_len}/{k_len}"),
            ));
        }
        let dims = AttnDims {
            batch: qm / q_len,
            q_len,
            k_len,
            d,
            heads,
        };
        let (out, probs) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
        );
        let out = Tensor::new([qm, d], out)?;
        self.push("attention", out, Op::Attention { q, k, v, dims, probs }, &[q, k, v])
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_shape));
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            // keep nothing for interior nodes
        }

        let mut leaf = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                leaf.insert(id, g);
            }
        }
        Ok(Gradients {
            leaf,
            names: self.params,
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let shaped = |like: &Tensor<T>, data: Vec<T>| Tensor::new(like.shape().to_vec(), data);

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if needs(*row) {
                    let sums = kernels::col_sums(g.data(), g.rows(), g.cols());
                    acc(*row, shaped(val(*row), sums)?);
                }
            }
            Op::MulRow(a, row) => {
                let n = g.cols();
                let r = val(*row).data();
                if needs(*a) {
                    let data = g.data().iter().enumerate().map(|(i, &x)| x * r[i % n]).collect();
                    acc(*a, shaped(g, data)?);
                }
                if needs(*row) {
                    let prod = g.zip_map(val(*a), |x, y| x * y);
                    let sums = kernels::col_sums(prod.data(), g.rows(), n);
                    acc(*row, shaped(val(*row), sums)?);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    acc(*a, Tensor::new([m, k], kernels::matmul_nt(g.data(), bv.data(), m, n, k))?);
                }
                if needs(*b) {
                    acc(*b, Tensor::new([k, n], kernels::matmul_tn(av.data(), g.data(), m, k, n))?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gx, x| if x > T::zero() { gx } else { T::zero() })),
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx * kernels::gelu_grad(x))),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gx, y| gx * y * (T::one() - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gx, y| gx * (T::one() - y * y))),
            Op::Softmax(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut data = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                    for j in 0..n {
                        data[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, shaped(y, data)?);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut data = vec![T::zero(); m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gsum = gr.iter().copied().sum::<T>();
                    for j in 0..n {
                        data[i * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                acc(*a, shaped(y, data)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (g.rows(), g.cols());
                let gd = g.data();
                let gam = val(*gamma).data();
                if needs(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for i in 0..m * n {
                        dg[i % n] = dg[i % n] + gd[i] * xhat[i];
                    }
                    acc(*gamma, shaped(val(*gamma), dg)?);
                }
                if needs(*beta) {
                    acc(*beta, shaped(val(*beta), kernels::col_sums(gd, m, n))?);
                }
                if needs(*x) {
                    let nn = T::of(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dxh = gd[i * n + j] * gam[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[i * n + j];
                        }
                        for j in 0..n {
                            let dxh = gd[i * n + j] * gam[j];
                            dx[i * n + j] = inv_std[i] / nn * (nn * dxh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                    acc(*x, shaped(val(*x), dx)?);
                }
            }
            Op::MeanPool { x, group } => {
                let xv = val(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let inv = T::of(1.0 / *group as f64);
                let mut data = vec![T::zero(); m * n];
                for i in 0..m {
                    let src = g.row(i / group);
                    for j in 0..n {
                        data[i * n + j] = src[j] * inv;
                    }
                }
                acc(*x, shaped(xv, data)?);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pn = val(p).cols();
                    if needs(p) {
                        let mut data = Vec::with_capacity(m * pn);
                        for i in 0..m {
                            data.extend_from_slice(&g.row(i)[offset..offset + pn]);
                        }
                        acc(p, shaped(val(p), data)?);
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        acc(p, shaped(val(p), g.data()[offset..offset + len].to_vec())?);
                    }
                    offset += len;
                    debug_assert_eq!(len % n, 0);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut data = vec![T::zero(); m * n];
                for i in 0..m {
                    data[i * n + start..i * n + start + len].copy_from_slice(g.row(i));
                }
                acc(*x, shaped(xv, data)?);
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let n = xv.cols();
                let mut data = vec![T::zero(); xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &v) in data[src * n..(src + 1) * n].iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*x, shaped(xv, data)?);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape().to_vec())?),
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape().to_vec(), g.item())),
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape().to_vec(), g.item() / T::of(xv.len() as f64)));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = T::of(2.0) * g.item() / T::of(av.len() as f64);
                let diff = av.zip_map(bv, |x, y| (x - y) * c);
                if needs(*b) {
                    acc(*b, diff.map(|x| -x));
                }
                acc(*a, diff);
            }
            Op::CrossEntropyProbs { p, target } => {
                let pv = val(*p);
                let eps = T::of(CE_EPS);
                let c = g.item() / T::of(pv.rows() as f64);
                let data = pv
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&q, &t)| if q > eps && t != T::zero() { -t * c / q } else { T::zero() })
                    .collect();
                acc(*p, shaped(pv, data)?);
            }
            Op::CrossEntropyLogits { logits, labels, probs } => {
                let lv = val(*logits);
                let (m, n) = (lv.rows(), lv.cols());
                let c = g.item() / T::of(m as f64);
                let mut data: Vec<T> = probs.iter().map(|&p| p * c).collect();
                for (i, &l) in labels.iter().enumerate() {
                    data[i * n + l] = data[i * n + l] - c;
                }
                acc(*logits, shaped(lv, data)?);
            }
            Op::CosineRows { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (av.rows(), av.cols());
                let mut da = vec![T::zero(); m * n];
                let mut db = vec![T::zero(); m * n];
                for i in 0..m {
                    let (x, y) = (av.row(i), bv.row(i));
                    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let cos = node.value.data()[i];
                    let gi = g.data()[i];
                    for j in 0..n {
                        da[i * n + j] = gi * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                        db[i * n + j] = gi * (x[j] / (nx * ny) - cos * y[j] / (ny * ny));
                    }
                }
                if needs(*a) {
                    acc(*a, shaped(av, da)?);
                }
                if needs(*b) {
                    acc(*b, shaped(bv, db)?);
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = attention::backward(
                    g.data(),
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    *dims,
                );
                if needs(*q) {
                    acc(*q, shaped(val(*q), dq)?);
                }
                if needs(*k) {
                    acc(*k, shaped(val(*k), dk)?);
                }
                if needs(*v) {
                    acc(*v, shaped(val(*v), dv)?);
                }
            }
        }
        Ok(())
    }
}

/// Gradients of gradient-requiring leaves after [`Tape::backward`].
pub struct Gradients<T> {
    leaf: HashMap<usize, Tensor<T>>,
    names: BTreeMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf.get(&v.0)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|v| self.leaf.get(&v.0))
    }

    /// Named parameter gradients, in name order.
    pub fn named(&self) -> BTreeMap<String, &Tensor<T>> {
        self.names
            .iter()
            .filter_map(|(n, v)| self.leaf.get(&v.0).map(|g| (n.clone(), g)))
            .collect()
    }

    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let names = std::mem::take(&mut self.names);
        names
            .into_iter()
            .filter_map(|(n, v)| self.leaf.remove(&v.0).map(|g| (n, g)))
            .collect()
    }
}

#[cfg(test)]
mod tests;
