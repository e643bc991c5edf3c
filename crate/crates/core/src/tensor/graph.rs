use std::sync::Arc;

use rand::Rng;

use super::{Scalar, Tensor, TensorError};

/// Additive mask entry standing in for negative infinity.
pub const MASK_VALUE: f64 = -1e9;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        valid: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    RelShift { x: Var, offset: usize },
    Sum(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, which is
/// a topological order, so the backward sweep is a single reverse pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if bv.shape().len() != 2 {
            return Err(mismatch("matmul", av, bv));
        } else if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if bk != k {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(m, k, n, av.data(), false, bv.data(), trans_b, out.data_mut(), false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += *b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddRow { x, bias }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v > T::zero() { *v } else { T::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Swaps the last two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = xv.data()[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", first, pv));
            }
            total += pv.cols();
        }
        let mut out = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let c = pv.cols();
            for r in 0..rows {
                out.data_mut()[r * total + offset..r * total + offset + c]
                    .copy_from_slice(pv.row(r));
            }
            offset += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&refs)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let c = xv.cols();
        if start > end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                size: c,
            });
        }
        let rows = xv.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, w], data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                size: xv.rows(),
            });
        }
        let out = xv.slice_rows(start, end);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    /// Row-wise softmax of `scores + mask`. Mask entries are `0` (keep) or
    /// [`MASK_VALUE`] (drop); a row with every entry dropped yields zeros.
    pub fn masked_softmax(&mut self, scores: Var, mask: &Tensor<T>) -> Result<Var, TensorError> {
        let sv = self.value(scores);
        if sv.shape() != mask.shape() {
            return Err(mismatch("masked_softmax", sv, mask));
        }
        let c = sv.cols();
        let drop_below = T::from_f64_lossy(MASK_VALUE * 0.5);
        let mut out = Tensor::zeros(sv.shape());
        if c > 0 {
            for ((orow, srow), mrow) in out
                .data_mut()
                .chunks_mut(c)
                .zip(sv.data().chunks(c))
                .zip(mask.data().chunks(c))
            {
                if mrow.iter().all(|&m| m < drop_below) {
                    continue;
                }
                let mut max = T::neg_infinity();
                for (s, m) in srow.iter().zip(mrow) {
                    max = max.max(*s + *m);
                }
                let mut total = T::zero();
                for ((o, s), m) in orow.iter_mut().zip(srow).zip(mrow) {
                    *o = (*s + *m - max).exp();
                    total += *o;
                }
                orow.iter_mut().for_each(|o| *o /= total);
            }
        }
        let ng = self.ng(scores);
        Ok(self.push(out, Op::MaskedSoftmax(scores), ng))
    }

    /// Normalizes each row to zero mean and unit variance (epsilon inside
    /// the square root), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let rows = xv.rows();
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out.data_mut()[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        if !ng {
            xhat.clear();
            rstd.clear();
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Gathers rows of `table` (shape `[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let (vocab, dim) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, mask }, ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows flagged `valid`. Zero when no row is valid.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        valid: &[bool],
    ) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows || valid.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        let mut count = 0usize;
        for r in 0..rows {
            if !valid[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: vocab,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            probs[r * vocab..(r + 1) * vocab]
                .iter_mut()
                .for_each(|p| *p /= z);
            total += z.ln() + max - row[t];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                valid: valid.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Re-indexes a `[rows, dist]` matrix of per-distance values into a
    /// `[rows, keys]` matrix: `out[i, j] = x[i, offset + i - j]`, or zero
    /// when that distance falls outside `[0, dist)`.
    pub fn rel_shift(&mut self, x: Var, offset: usize, keys: usize) -> Var {
        let xv = self.value(x);
        let (rows, dist) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[rows, keys]);
        for i in 0..rows {
            for j in 0..keys {
                if let Some(d) = (offset + i).checked_sub(j) {
                    if d < dist {
                        out.data_mut()[i * keys + j] = xv.data()[i * dist + d];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RelShift { x, offset }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every node
    /// that depends on a parameter.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()])?;
        self.grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &Tensor<T>) {
        // Inputs always precede idx, so splitting keeps the borrow checker happy
        // while gradients are pushed into earlier slots.
        let node = &self.nodes[idx];
        let mut pending: Vec<(Var, Tensor<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if self.ng(*a) {
                    let mut ga = Tensor::zeros(av.shape());
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    T::gemm(m, n, k, g.data(), false, bv.data(), !*trans_b, ga.data_mut(), false);
                    pending.push((*a, ga));
                }
                if self.ng(*b) {
                    let mut gb = Tensor::zeros(bv.shape());
                    if *trans_b {
                        T::gemm(n, m, k, g.data(), true, av.data(), false, gb.data_mut(), false);
                    } else {
                        T::gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
                    }
                    pending.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                pending.push((*b, g.clone()));
            }
            Op::AddRow { x, bias } => {
                pending.push((*x, g.clone()));
                if self.ng(*bias) {
                    let bv = self.value(*bias);
                    let c = bv.len();
                    let mut gb = Tensor::zeros(bv.shape());
                    for row in g.data().chunks(c.max(1)) {
                        for (o, v) in gb.data_mut().iter_mut().zip(row) {
                            *o += *v;
                        }
                    }
                    pending.push((*bias, gb));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
                    pending.push((*a, Tensor::new(av.shape().to_vec(), d).unwrap()));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| *x * *y).collect();
                    pending.push((*b, Tensor::new(bv.shape().to_vec(), d).unwrap()));
                }
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= *s);
                pending.push((*x, gx));
            }
            Op::Relu(x) => {
                let out = &node.value;
                let mut gx = g.clone();
                for (gv, o) in gx.data_mut().iter_mut().zip(out.data()) {
                    if *o <= T::zero() {
                        *gv = T::zero();
                    }
                }
                pending.push((*x, gx));
            }
            Op::Transpose(x) => {
                let (r, c) = (g.rows(), g.cols());
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for i in 0..r {
                    for j in 0..c {
                        gx.data_mut()[j * r + i] = g.data()[i * c + j];
                    }
                }
                pending.push((*x, gx));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.ng(p) {
                        let mut gp = Tensor::zeros(pv.shape());
                        for r in 0..rows {
                            gp.data_mut()[r * c..(r + 1) * c].copy_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        pending.push((p, gp));
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if self.ng(p) {
                        let gp = Tensor::new(pv.shape().to_vec(), g.data()[start..start + n].to_vec())
                            .unwrap();
                        pending.push((p, gp));
                    }
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let w = g.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for r in 0..g.rows() {
                    gx.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                pending.push((*x, gx));
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                pending.push((*x, gx));
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut gx = Tensor::zeros(y.shape());
                if c > 0 {
                    for ((gxr, yr), gr) in gx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(g.data().chunks(c))
                    {
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for ((o, yv), gv) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o = *yv * (*gv - dot);
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let c = gv.len();
                let rows = g.rows();
                let n = T::from_usize(c).unwrap();
                if self.ng(*gain) {
                    let mut gg = Tensor::zeros(gv.shape());
                    for r in 0..rows {
                        for j in 0..c {
                            gg.data_mut()[j] += g.data()[r * c + j] * xhat[r * c + j];
                        }
                    }
                    pending.push((*gain, gg));
                }
                if self.ng(*bias) {
                    let mut gb = Tensor::zeros(self.value(*bias).shape());
                    for r in 0..rows {
                        for j in 0..c {
                            gb.data_mut()[j] += g.data()[r * c + j];
                        }
                    }
                    pending.push((*bias, gb));
                }
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            let d = g.data()[r * c + j] * gv.data()[j];
                            mean_d += d;
                            mean_dx += d * xhat[r * c + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let d = g.data()[r * c + j] * gv.data()[j];
                            gx.data_mut()[r * c + j] =
                                rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                        }
                    }
                    pending.push((*x, gx));
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let dim = tv.cols();
                let mut gt = Tensor::zeros(tv.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.data_mut()[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(g.row(r))
                    {
                        *o += *v;
                    }
                }
                pending.push((*table, gt));
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(a, b)| *a * *b).collect();
                pending.push((*x, Tensor::new(g.shape().to_vec(), d).unwrap()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                valid,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let vocab = lv.cols();
                let mut gl = Tensor::zeros(lv.shape());
                if *count > 0 {
                    let s = g.data()[0] / T::from_usize(*count).unwrap();
                    for r in 0..lv.rows() {
                        if !valid[r] {
                            continue;
                        }
                        let row = &mut gl.data_mut()[r * vocab..(r + 1) * vocab];
                        for (o, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o = *p * s;
                        }
                        row[targets[r]] -= s;
                    }
                }
                pending.push((*logits, gl));
            }
            Op::RelShift { x, offset } => {
                let xv = self.value(*x);
                let dist = xv.cols();
                let keys = g.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for i in 0..g.rows() {
                    for j in 0..keys {
                        if let Some(d) = (offset + i).checked_sub(j) {
                            if d < dist {
                                gx.data_mut()[i * dist + d] += g.data()[i * keys + j];
                            }
                        }
                    }
                }
                pending.push((*x, gx));
            }
            Op::Sum(x) => {
                pending.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0])));
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }
}
