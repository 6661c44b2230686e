//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node index order is already a
//! topological order: every input of node `i` has an index below `i`. The
//! backward pass therefore walks the node list from the end exactly once.

use crate::error::{Result, TensorError};
use crate::kernels::{self, gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: Var, b: Var },
    AddTrailing { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    MulConst { a: Var, factor: Vec<T> },
    Gelu { a: Var },
    Tanh { a: Var },
    Softmax { a: Var, cols: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Repeat { a: Var, times: usize },
    PassThrough { a: Var },
    Sum { a: Var },
    Mean { a: Var },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// A single forward recording. Build one per step, call [`Graph::backward`]
/// once, read gradients, drop it.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient accumulated for `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse-mode pass seeded with d(loss)/d(loss) = 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape();
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.grads[i].take() else { continue };
            if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
                return Err(TensorError::NonFinite(format!(
                    "gradient of node {i} at flat index {bad}"
                )));
            }
            self.backward_node(i, &grad);
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&mut self, i: usize, grad: &[T]) {
        // Each arm computes input contributions from immutable borrows, then
        // accumulates them once the borrows end.
        let mut contributions: Vec<(Var, Vec<T>)> = Vec::new();
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b, batch, m, k, n, shared_b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.wants(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    if shared_b {
                        let bm = if trans_b { MatRef::new(bv, n, k) } else { MatRef::new(bv, k, n).t() };
                        gemm(MatRef::new(grad, batch * m, n), bm, &mut da, false);
                    } else {
                        for s in 0..batch {
                            let bs = &bv[s * k * n..(s + 1) * k * n];
                            let bm = if trans_b { MatRef::new(bs, n, k) } else { MatRef::new(bs, k, n).t() };
                            gemm(
                                MatRef::new(&grad[s * m * n..(s + 1) * m * n], m, n),
                                bm,
                                &mut da[s * m * k..(s + 1) * m * k],
                                false,
                            );
                        }
                    }
                    contributions.push((a, da));
                }
                if self.wants(b) {
                    if shared_b {
                        let mut db = vec![T::zero(); k * n];
                        let am = MatRef::new(av, batch * m, k);
                        let gm = MatRef::new(grad, batch * m, n);
                        if trans_b {
                            gemm(gm.t(), am, &mut db, false);
                        } else {
                            gemm(am.t(), gm, &mut db, false);
                        }
                        contributions.push((b, db));
                    } else {
                        let mut db = vec![T::zero(); batch * k * n];
                        for s in 0..batch {
                            let am = MatRef::new(&av[s * m * k..(s + 1) * m * k], m, k);
                            let gm = MatRef::new(&grad[s * m * n..(s + 1) * m * n], m, n);
                            let out = &mut db[s * k * n..(s + 1) * k * n];
                            if trans_b {
                                gemm(gm.t(), am, out, false);
                            } else {
                                gemm(am.t(), gm, out, false);
                            }
                        }
                        contributions.push((b, db));
                    }
                }
            }
            &Op::Add { a, b } => {
                contributions.push((a, grad.to_vec()));
                contributions.push((b, grad.to_vec()));
            }
            &Op::AddTrailing { a, b } => {
                contributions.push((a, grad.to_vec()));
                if self.wants(b) {
                    let inner = self.nodes[b.0].value.len();
                    let mut db = vec![T::zero(); inner];
                    for chunk in grad.chunks_exact(inner) {
                        db.iter_mut().zip(chunk).for_each(|(d, g)| *d = *d + *g);
                    }
                    contributions.push((b, db));
                }
            }
            &Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.wants(a) {
                    contributions.push((a, grad.iter().zip(bv).map(|(g, y)| *g * *y).collect()));
                }
                if self.wants(b) {
                    contributions.push((b, grad.iter().zip(av).map(|(g, x)| *g * *x).collect()));
                }
            }
            &Op::Scale { a, factor } => {
                contributions.push((a, grad.iter().map(|g| *g * factor).collect()));
            }
            Op::MulConst { a, factor } => {
                contributions.push((*a, grad.iter().zip(factor).map(|(g, f)| *g * *f).collect()));
            }
            &Op::Gelu { a } => {
                let xs = self.nodes[a.0].value.data();
                contributions.push((a, grad.iter().zip(xs).map(|(g, &x)| *g * gelu_grad(x)).collect()));
            }
            &Op::Tanh { a } => {
                let ys = node.value.data();
                contributions.push((a, grad.iter().zip(ys).map(|(g, &y)| *g * (T::one() - y * y)).collect()));
            }
            &Op::Softmax { a, cols } => {
                let ys = node.value.data();
                let mut dx = vec![T::zero(); ys.len()];
                for ((y, g), d) in ys.chunks_exact(cols).zip(grad.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)) {
                    let dot: T = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
                    for j in 0..cols {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                contributions.push((a, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.nodes[gain.0].value.data();
                let cols = gv.len();
                let n = T::from_usize(cols).expect("usize fits");
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    for (r, ((xh, g), d)) in
                        xhat.chunks_exact(cols).zip(grad.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)).enumerate()
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..cols {
                            let dxh = g[j] * gv[j];
                            sum_d = sum_d + dxh;
                            sum_dx = sum_dx + dxh * xh[j];
                        }
                        let scale = rstd[r] / n;
                        for j in 0..cols {
                            let dxh = g[j] * gv[j];
                            d[j] = scale * (n * dxh - sum_d - xh[j] * sum_dx);
                        }
                    }
                    contributions.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); cols];
                    for (xh, g) in xhat.chunks_exact(cols).zip(grad.chunks_exact(cols)) {
                        for j in 0..cols {
                            dg[j] = dg[j] + g[j] * xh[j];
                        }
                    }
                    contributions.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); cols];
                    for g in grad.chunks_exact(cols) {
                        db.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g);
                    }
                    contributions.push((*bias, db));
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = grad[0] / T::from_usize(b).expect("usize fits");
                let mut d: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * c + label] = d[row * c + label] - scale;
                }
                contributions.push((*logits, d));
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tshape = self.nodes[table.0].value.shape();
                    let dim = tshape[1];
                    let mut dt = vec![T::zero(); tshape[0] * dim];
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &grad[row * dim..(row + 1) * dim];
                        let dst = &mut dt[id * dim..(id + 1) * dim];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d = *d + *g);
                    }
                    contributions.push((*table, dt));
                }
            }
            Op::Permute { a, axes } => {
                let out_shape = node.value.shape();
                contributions.push((*a, kernels::permute(grad, out_shape, &kernels::inverse_axes(axes))));
            }
            &Op::Reshape { a } | &Op::PassThrough { a } => {
                contributions.push((a, grad.to_vec()));
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let dim = self.nodes[p.0].value.shape()[*axis];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * dim * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&grad[base..base + dim * inner]);
                        }
                        contributions.push((p, dp));
                    }
                    offset += dim;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let in_shape = self.nodes[a.0].value.shape();
                let len = node.value.shape()[axis];
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[axis];
                let mut da = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&grad[src..src + len * inner]);
                }
                contributions.push((a, da));
            }
            &Op::Repeat { a, times } => {
                let inner = self.nodes[a.0].value.len();
                let mut da = vec![T::zero(); inner];
                for chunk in grad.chunks_exact(inner).take(times) {
                    da.iter_mut().zip(chunk).for_each(|(d, g)| *d = *d + *g);
                }
                contributions.push((a, da));
            }
            &Op::Sum { a } => {
                let len = self.nodes[a.0].value.len();
                contributions.push((a, vec![grad[0]; len]));
            }
            &Op::Mean { a } => {
                let len = self.nodes[a.0].value.len();
                let g = grad[0] / T::from_usize(len.max(1)).expect("usize fits");
                contributions.push((a, vec![g; len]));
            }
        }
        for (v, c) in contributions {
            self.accumulate(v, c);
        }
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}
