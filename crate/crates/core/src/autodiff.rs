//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every primitive appends one node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, so parents always precede
//! their children and [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use xpruner::autodiff::Tape;
//! use xpruner::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = tape.square(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, for_each_broadcast, reduce_to_shape, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    Gelu(Var),
    Softmax(Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    SumKeep(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    SecondDiff(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Concat(Var, Var, usize),
    Narrow(Var, usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    visits: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
        self.visits = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that participate in the reverse sweep.
    pub fn grad_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    /// Node visits performed by the last call to [`Tape::backward`].
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated by the last backward pass, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shapes(name, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&shape, ta.shape(), tb.shape(), |o, i, j| out[o] = f(da[i], db[j]));
        self.push(name, Tensor::from_parts(shape, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).map(f);
        self.push(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, gelu, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Batched matrix product `(.., m, k) x (.., k, n)`. The right operand may
    /// also be a plain `(k, n)` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let boff = if shared { 0 } else { bi * k * n };
            mm(
                &ta.data()[bi * m * k..(bi + 1) * m * k],
                &tb.data()[boff..boff + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push("matmul", Tensor::from_parts(shape, out), Op::Matmul(a, b), &[a, b])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut seen = vec![false; t.ndim()];
        if perm.len() != t.ndim() || perm.iter().any(|&p| p >= t.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {:?}", t.shape())));
        }
        let (shape, data) = permute_data(t.data(), t.shape(), perm);
        self.push(
            "permute",
            Tensor::from_parts(shape, data),
            Op::Permute(a, perm.to_vec()),
            &[a],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::invalid("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over every axis except `axis`; the result has shape `(extent,)`.
    pub fn sum_keep(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid("sum_keep", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let extent = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; extent];
        for (i, v) in t.data().iter().enumerate() {
            out[(i / inner) % extent] += v;
        }
        self.push("sum_keep", Tensor::from_parts(vec![extent], out), Op::SumKeep(a, axis), &[a])
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.ndim() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let c = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} >= {c} classes")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= labels.len() as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Picks slice `index[b]` of axis 0 for every batch element `b`:
    /// `(C, ..rest) -> (B, ..rest)`. The adjoint scatter-adds.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let c = t.shape()[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::invalid("gather", format!("class index {bad} >= {c}")));
        }
        let out = t.index_select(0, index)?;
        self.push("gather", out, Op::Gather(a, index.to_vec()), &[a])
    }

    /// Discrete second difference `x[i-1] - 2 x[i] + x[i+1]` along `axis`,
    /// with replicate padding at both ends.
    pub fn second_diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::invalid("second_diff", format!("axis {axis} out of range")));
        }
        let out = apply_along_axis(t.data(), t.shape(), axis, false);
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("second_diff", t, Op::SecondDiff(a, axis), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = t.numel() / d;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let ok = sa.len() == sb.len()
            && axis < sa.len()
            && (0..sa.len()).all(|i| i == axis || sa[i] == sb[i]);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ca, cb) = (sa[axis] * inner, sb[axis] * inner);
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for o in 0..outer {
            out.extend_from_slice(&ta.data()[o * ca..(o + 1) * ca]);
            out.extend_from_slice(&tb.data()[o * cb..(o + 1) * cb]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        self.push("concat", Tensor::from_parts(shape, out), Op::Concat(a, b, axis), &[a, b])
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).narrow(axis, start, len)?;
        self.push("narrow", t, Op::Narrow(a, axis, start), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every node reached are
    /// retained until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        self.visits = 0;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.visits += 1;
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            backprop_node(&self.nodes, i, g, lo);
        }
        Ok(())
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = &node.value;
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(*a) {
                accumulate(nodes, grads, *a, reduce_to_shape(g, out.shape(), val(*a).shape()));
            }
            if needs(*b) {
                let mut gb = reduce_to_shape(g, out.shape(), val(*b).shape());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (da, db) = (ta.data(), tb.data());
            if needs(*a) {
                let mut full = vec![0.0; g.len()];
                for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |o, _, j| full[o] = g[o] * db[j]);
                accumulate(nodes, grads, *a, reduce_to_shape(&full, out.shape(), ta.shape()));
            }
            if needs(*b) {
                let mut full = vec![0.0; g.len()];
                for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |o, k, _| full[o] = g[o] * da[k]);
                accumulate(nodes, grads, *b, reduce_to_shape(&full, out.shape(), tb.shape()));
            }
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Tanh(a) => {
            let gx = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(nodes, grads, *a, gx)
        }
        Op::Abs(a) => {
            let gx = g
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, gx)
        }
        Op::Sqrt(a) => {
            let gx = g
                .iter()
                .zip(out.data())
                .map(|(g, y)| if *y > 0.0 { g * 0.5 / y } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, gx)
        }
        Op::Square(a) => {
            let gx = g.iter().zip(val(*a).data()).map(|(g, x)| 2.0 * g * x).collect();
            accumulate(nodes, grads, *a, gx)
        }
        Op::Gelu(a) => {
            let gx = g.iter().zip(val(*a).data()).map(|(g, x)| g * gelu_grad(*x)).collect();
            accumulate(nodes, grads, *a, gx)
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), xr) in g.chunks(n).zip(out.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    xr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, gx)
        }
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (sa, sb) = (ta.shape(), tb.shape());
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = sb[sb.len() - 1];
            let shared = sb.len() == 2;
            let batch: usize = sa[..sa.len() - 2].iter().product();
            if needs(*a) {
                let mut ga = vec![0.0; ta.numel()];
                for bi in 0..batch {
                    let boff = if shared { 0 } else { bi * k * n };
                    mm_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &tb.data()[boff..boff + k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; tb.numel()];
                for bi in 0..batch {
                    let boff = if shared { 0 } else { bi * k * n };
                    mm_tn(
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (_, gx) = permute_data(g, out.shape(), &inv);
            accumulate(nodes, grads, *a, gx)
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; val(*a).numel()]),
        Op::SumKeep(a, axis) => {
            let t = val(*a);
            let extent = t.shape()[*axis];
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let gx = (0..t.numel()).map(|i| g[(i / inner) % extent]).collect();
            accumulate(nodes, grads, *a, gx)
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = val(*logits).shape()[1];
            let scale = g[0] / labels.len() as f64;
            let mut gx = probs.clone();
            for (row, &y) in gx.chunks_mut(c).zip(labels) {
                row[y] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            accumulate(nodes, grads, *logits, gx)
        }
        Op::Gather(a, index) => {
            let t = val(*a);
            let inner = t.numel() / t.shape()[0];
            let mut gx = vec![0.0; t.numel()];
            for (b, &c) in index.iter().enumerate() {
                let dst = &mut gx[c * inner..(c + 1) * inner];
                dst.iter_mut()
                    .zip(&g[b * inner..(b + 1) * inner])
                    .for_each(|(d, s)| *d += s);
            }
            accumulate(nodes, grads, *a, gx)
        }
        Op::SecondDiff(a, axis) => {
            let gx = apply_along_axis(g, out.shape(), *axis, true);
            accumulate(nodes, grads, *a, gx)
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = val(*gamma).numel();
            let gam = val(*gamma).data();
            if needs(*gamma) || needs(*beta) {
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                }
                accumulate(nodes, grads, *gamma, gg);
                accumulate(nodes, grads, *beta, gbeta);
            }
            if needs(*x) {
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, hr), xr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        xr[j] = rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::Concat(a, b, axis) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let outer: usize = sa[..*axis].iter().product();
            let inner: usize = sa[axis + 1..].iter().product();
            let (ca, cb) = (sa[*axis] * inner, sb[*axis] * inner);
            let mut ga = Vec::with_capacity(outer * ca);
            let mut gb = Vec::with_capacity(outer * cb);
            for o in 0..outer {
                let base = o * (ca + cb);
                ga.extend_from_slice(&g[base..base + ca]);
                gb.extend_from_slice(&g[base + ca..base + ca + cb]);
            }
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Narrow(a, axis, start) => {
            let s = val(*a).shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; val(*a).numel()];
            for o in 0..outer {
                let dst = (o * s[*axis] + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, *a, gx)
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `out += a(m,k) * b(k,n)`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out(m,k) += g(m,n) * b(k,n)^T`
fn mm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out(k,n) += a(m,k)^T * g(m,n)`
fn mm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let nd = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

/// Applies the replicate-padded second-difference operator along `axis`
/// (or its transpose).
fn apply_along_axis(data: &[f64], shape: &[usize], axis: usize, transpose: bool) -> Vec<f64> {
    let c = shape[axis];
    // coefficient matrix d[i][j]: output i, input j
    let mut d = vec![0.0; c * c];
    for i in 0..c {
        d[i * c + i] -= 2.0;
        d[i * c + i.saturating_sub(1)] += 1.0;
        d[i * c + (i + 1).min(c - 1)] += 1.0;
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..c {
            for j in 0..c {
                let coef = if transpose { d[j * c + i] } else { d[i * c + j] };
                if coef == 0.0 {
                    continue;
                }
                let dst = (o * c + i) * inner;
                let src = (o * c + j) * inner;
                for t in 0..inner {
                    out[dst + t] += coef * data[src + t];
                }
            }
        }
    }
    out
}

/// Maximum over coordinates of the relative error between the tape gradient
/// of `f` at `x` and the central finite difference with step `eps`.
///
/// The relative error of a coordinate is `|g - fd| / max(|g|, |fd|, 1e-3)`;
/// the floor keeps round-off in near-zero gradients from dominating.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside (0, 1e-3]")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let y = f(&mut tape, v)?;
        let val = tape.value(y).item();
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let g = analytic.data()[i];
        let denom = g.abs().max(fd.abs()).max(1e-3);
        worst = worst.max((g - fd).abs() / denom);
    }
    Ok(worst)
}
