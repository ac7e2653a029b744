//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node once. Nodes whose inputs never require gradients are
//! skipped entirely; that is how frozen parameters stay gradient-free.

use super::kernels::{self, L2_EPS};
use super::{NumericsError, Tensor};
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    L2NormRows(Var, Vec<T>),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstds: Vec<T>, xhat: Tensor<T> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, probs: Tensor<T> },
    CrossEntropy { logits: Var, target: usize, probs: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf node; `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`; with `b` a `d_out×d_in` weight this is a row-wise linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() || va.cols() != vb.cols() {
            return Err(mismatch("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a bias vector (length = cols) to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        if vb.len() != cols {
            return Err(mismatch("add_row", format!("{:?} + bias {:?}", vx.shape(), vb.shape())));
        }
        let mut out = vx.clone();
        let bd = vb.data();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", format!("{:?} * {:?}", va.shape(), vb.shape())));
        }
        let out = va.zip_map(vb, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// L2-normalises every row: `x / (‖x‖₂ + ε)`.
    pub fn l2norm_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let n = kernels::dot(row, row).sqrt();
            let denom = n + T::lit(L2_EPS);
            for v in row.iter_mut() {
                *v /= denom;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2NormRows(x, norms), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let ones = vec![T::one(); self.value(x).cols()];
        let zeros = vec![T::zero(); ones.len()];
        let (xhat, _, rstds) = kernels::layer_norm(self.value(x), &ones, &zeros)?;
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != xhat.cols() || b.len() != xhat.cols() {
            return Err(mismatch("layer_norm", format!("gamma {:?} for {:?}", g.shape(), xhat.shape())));
        }
        let cols = xhat.cols();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(cols) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, rstds, xhat }, rg))
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", format!("cols {} vs {}", v.cols(), cols)));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(mismatch("concat_cols", format!("rows {} vs {}", self.value(p).rows(), rows)));
            }
        }
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let v = self.value(x);
        if start > end || end > v.rows() {
            return Err(mismatch("slice_rows", format!("{start}..{end} of {:?}", v.shape())));
        }
        let c = v.cols();
        let out = Tensor::new(vec![end - start, c], v.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let v = self.value(x);
        if start > end || end > v.cols() {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {:?}", v.shape())));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.row_slice(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Mean over rows, producing a `1×cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        if rows == 0 {
            return Err(mismatch("mean_rows", "no rows".into()));
        }
        let mut acc = vec![T::zero(); cols];
        for r in 0..rows {
            for (a, &b) in acc.iter_mut().zip(v.row_slice(r)) {
                *a += b;
            }
        }
        let n = T::from_usize_lossy(rows);
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::row(acc);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= t.rows() {
                return Err(mismatch("gather_rows", format!("row {i} of {:?}", t.shape())));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Single-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, NumericsError> {
        let probs = kernels::attention_weights(self.value(q), self.value(k))?;
        if self.value(v).rows() != probs.cols() {
            return Err(mismatch("attention", format!("V {:?} for {} keys", self.shape(v), probs.cols())));
        }
        let out = kernels::matmul(&probs, self.value(v))?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, rg))
    }

    /// Softmax cross-entropy of a `1×K` logit row against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NumericsError> {
        let l = self.value(logits);
        if l.rows() != 1 || target >= l.cols() {
            return Err(mismatch("cross_entropy", format!("target {target} for {:?}", l.shape())));
        }
        let probs = kernels::softmax_rows(l);
        let p = probs.data()[target].max(T::min_positive_value());
        let out = Tensor::scalar(-p.ln());
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, target, probs }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g.reshape(self.shape(v)).expect("grad shape")),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), NumericsError> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(g, self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(self.value(*a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, kernels::matmul(g, self.value(*b))?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(g, self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let cols = g.cols();
                    let mut db = vec![T::zero(); cols];
                    for r in 0..g.rows() {
                        for (d, &v) in db.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::row(db));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormRows(x, norms) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for (r, &n) in norms.iter().enumerate() {
                    let (xr, gr) = (xv.row_slice(r), g.row_slice(r));
                    let denom = n + T::lit(L2_EPS);
                    let coef = if n > T::zero() { kernels::dot(gr, xr) / (n * denom * denom) } else { T::zero() };
                    for c in 0..cols {
                        dx.push(gr[c] / denom - xr[c] * coef);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gamma, beta, rstds, xhat } => {
                let cols = xhat.cols();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for r in 0..xhat.rows() {
                        for c in 0..cols {
                            dg[c] += g.row_slice(r)[c] * xhat.row_slice(r)[c];
                            db[c] += g.row_slice(r)[c];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::row(dg));
                    self.accumulate(grads, *beta, Tensor::row(db));
                }
                if self.requires_grad(*x) {
                    let n = T::from_usize_lossy(cols);
                    let mut dx = Vec::with_capacity(xhat.len());
                    for (r, &rstd) in rstds.iter().enumerate() {
                        let (gr, hr) = (g.row_slice(r), xhat.row_slice(r));
                        let dxhat: Vec<T> = (0..cols).map(|c| gr[c] * gam[c]).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2 = kernels::dot(&dxhat, hr);
                        for c in 0..cols {
                            dx.push(rstd / n * (n * dxhat[c] - s1 - hr[c] * s2));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xhat.shape().to_vec(), dx)?);
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.requires_grad(p) {
                        let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![rows, c], slice)?);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![g.rows(), w], data)?);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(x, start) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(&[xv.rows(), c]);
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (rows, c, w) = (xv.rows(), xv.cols(), g.cols());
                let mut dx = Tensor::zeros(&[rows, c]);
                for r in 0..rows {
                    dx.data_mut()[r * c + start..r * c + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let inv = T::one() / T::from_usize_lossy(xv.rows());
                let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
                let mut data = Vec::with_capacity(xv.len());
                for _ in 0..xv.rows() {
                    data.extend_from_slice(&row);
                }
                self.accumulate(grads, *x, Tensor::new(vec![xv.rows(), xv.cols()], data)?);
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let c = t.cols();
                let mut dt = Tensor::zeros(&[t.rows(), c]);
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &v) in dt.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone()),
            Op::Attention { q, k, v, probs } => {
                if self.requires_grad(*v) {
                    self.accumulate(grads, *v, kernels::matmul_tn(probs, g)?);
                }
                if self.requires_grad(*q) || self.requires_grad(*k) {
                    let dp = kernels::matmul_nt(g, self.value(*v))?;
                    let cols = probs.cols();
                    let mut ds = Vec::with_capacity(probs.len());
                    for r in 0..probs.rows() {
                        let (pr, dr) = (probs.row_slice(r), dp.row_slice(r));
                        let inner = kernels::dot(pr, dr);
                        for c in 0..cols {
                            ds.push(pr[c] * (dr[c] - inner));
                        }
                    }
                    let scale = T::one() / T::from_usize_lossy(self.value(*q).cols().max(1)).sqrt();
                    let ds = Tensor::new(probs.shape().to_vec(), ds)?.scale(scale);
                    if self.requires_grad(*q) {
                        self.accumulate(grads, *q, kernels::matmul(&ds, self.value(*k))?);
                    }
                    if self.requires_grad(*k) {
                        self.accumulate(grads, *k, kernels::matmul_tn(&ds, self.value(*q))?);
                    }
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                let s = g.data()[0];
                let mut d = probs.clone();
                d.data_mut()[*target] -= T::one();
                self.accumulate(grads, *logits, d.scale(s));
            }
        }
        Ok(())
    }
}
