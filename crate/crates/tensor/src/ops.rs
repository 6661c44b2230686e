//! Forward definitions of every recorded operation.

use crate::error::{Result, TensorError};
use crate::graph::{gelu, Graph, Op, Var};
use crate::kernels::{self, gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<T: Scalar> Graph<T> {
    /// Batched matrix product `a·b`.
    ///
    /// `a` is `[..., m, k]`. `b` is either a shared `[k, n]` matrix or carries
    /// the same leading batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a·bᵀ` where `b` is stored as `[..., n, k]` (or shared `[n, k]`).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch(op, &ashape, &bshape));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, n) = if trans_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        if k != bk {
            return Err(mismatch(op, &ashape, &bshape));
        }
        let lead = &ashape[..ashape.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = bshape.len() == 2;
        if !shared_b && bshape[..bshape.len() - 2] != *lead {
            return Err(mismatch(op, &ashape, &bshape));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                let bm = if trans_b { MatRef::new(bv, n, k).t() } else { MatRef::new(bv, k, n) };
                gemm(MatRef::new(av, batch * m, k), bm, &mut out, false);
            } else {
                for s in 0..batch {
                    let bs = &bv[s * k * n..(s + 1) * k * n];
                    let bm = if trans_b { MatRef::new(bs, n, k).t() } else { MatRef::new(bs, k, n) };
                    gemm(
                        MatRef::new(&av[s * m * k..(s + 1) * m * k], m, k),
                        bm,
                        &mut out[s * m * n..(s + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::MatMul { a, b, trans_b, batch, m, k, n, shared_b },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias vectors, positional tables). No other broadcasting is supported.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.shape(a);
        let bshape = self.shape(b);
        if bshape.len() > ashape.len() || ashape[ashape.len() - bshape.len()..] != *bshape {
            return Err(mismatch("add_broadcast", ashape, bshape));
        }
        let inner = self.value(b).len();
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        if inner > 0 {
            for chunk in data.chunks_exact_mut(inner) {
                chunk.iter_mut().zip(bv).for_each(|(x, y)| *x = *x + *y);
            }
        }
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::AddTrailing { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let data = self.value(a).data().iter().map(|x| *x * factor).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Scale { a, factor })
    }

    /// Elementwise product with a constant (non-differentiable) tensor, e.g. a dropout mask.
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(TensorError::LengthMismatch { shape: self.shape(a).to_vec(), len: factor.len() });
        }
        let data = self.value(a).data().iter().zip(&factor).map(|(x, f)| *x * *f).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::MulConst { a, factor }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::Tanh { a })
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or(TensorError::InvalidShape {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let data = softmax_rows(self.value(a).data(), cols);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Softmax { a, cols }))
    }

    /// Normalize each last-axis row to zero mean and unit variance, then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(mismatch("layer_norm", &shape, self.shape(gain)));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(cols).expect("usize fits");
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / cols.max(1);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(Tensor::new(shape, out)?, rg, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits` `[b, c]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                msg: format!("logits {shape:?} with {} labels", labels.len()),
            });
        }
        let c = shape[1];
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(TensorError::LabelOutOfRange { index, label, classes: c });
        }
        let lv = self.value(logits).data();
        let probs = softmax_rows(lv, c);
        let mut loss = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let r = &lv[row * c..(row + 1) * c];
            let max = r.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + r.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
            loss = loss + lse - r[label];
        }
        loss = loss / T::from_usize(labels.len()).expect("usize fits");
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Gather rows of `table` `[vocab, dim]`; output shape is `prefix_shape + [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix_shape: &[usize]) -> Result<Var> {
        let tshape = self.shape(table).to_vec();
        if tshape.len() != 2 || prefix_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                msg: format!("table {tshape:?}, {} ids for shape {prefix_shape:?}", ids.len()),
            });
        }
        let (vocab, dim) = (tshape[0], tshape[1]);
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange { index: id, len: vocab });
            }
            data.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(dim);
        let rg = self.any_grad(&[table]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&x| x < shape.len() && !std::mem::replace(&mut seen[x], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("axes {axes:?} for shape {shape:?}"),
            });
        }
        let data = kernels::permute(self.value(a).data(), &shape, axes);
        let out_shape = axes.iter().map(|&x| shape[x]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Permute { a, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Reshape { a }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Narrow { a, axis, start }))
    }

    /// Stack `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Var {
        let src = self.value(a);
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src.data());
        }
        let mut shape = vec![times];
        shape.extend_from_slice(src.shape());
        let rg = self.any_grad(&[a]);
        self.push(Tensor::new(shape, data).expect("repeat shape"), rg, Op::Repeat { a, times })
    }

    /// Add a constant per-(batch, key column) bias to attention logits.
    ///
    /// `a` is `[b, ..., cols]` and `mask` is `[b, cols]` (use `-inf` to exclude
    /// a key). The mask is broadcast over every middle dimension. Gradients pass
    /// through unchanged; excluded columns receive zero weight from the
    /// following softmax, so nothing flows back through them.
    pub fn add_key_mask(&mut self, a: Var, mask: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let ms = mask.shape();
        if shape.len() < 2 || ms.len() != 2 || ms[0] != shape[0] || ms[1] != shape[shape.len() - 1] {
            return Err(mismatch("add_key_mask", &shape, ms));
        }
        let (b, cols) = (ms[0], ms[1]);
        let per_batch = self.value(a).len() / b.max(1);
        let mut data = self.value(a).data().to_vec();
        for s in 0..b {
            let mrow = &mask.data()[s * cols..(s + 1) * cols];
            for row in data[s * per_batch..(s + 1) * per_batch].chunks_exact_mut(cols) {
                row.iter_mut().zip(mrow).for_each(|(x, m)| *x = *x + *m);
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, data)?, rg, Op::PassThrough { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).expect("usize fits");
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean { a })
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if cols == 0 {
        return out;
    }
    for (src, dst) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (*s - max).exp();
            total = total + *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / total);
    }
    out
}
