//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. Because an
//! operand must exist before the operation that consumes it, node indices
//! are already a topological order, and [`Graph::backward`] is a single
//! reverse sweep over them.
//!
//! Parameters are read straight out of a borrowed [`ParamStore`] (no copy).
//! Their gradients come back in a [`Gradients`] value, which is then added
//! into the store with [`Gradients::accumulate_into`]. A graph belongs to one
//! thread; separate graphs over separate stores are independent.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

enum NodeValue {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MaskMul(Var, Vec<f64>),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Concat { a: Var, b: Var, axis: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Rows { x: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { scores: Var, gold: Vec<usize> },
    Sum(Var),
    Additive { a: Var, b: Var, v: Var },
}

struct Node {
    value: NodeValue,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward sweep: the gradient of every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient with respect to `var`, if it required one and was reached.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (i, var) in self.param_vars.iter().enumerate() {
            let Some(var) = var else { continue };
            if let Some(g) = self.wrt(*var) {
                let dst = &mut store.get_mut(ParamId(i)).grad;
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with independent partial sums so the loop vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].value {
            NodeValue::Owned(t) => t,
            NodeValue::Param(id) => self.params.value(*id),
        }
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: NodeValue::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf for a stored parameter. Repeated calls return the same node,
    /// so every use of a parameter accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: NodeValue::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// A constant copy of `var`'s current value, cut off from the graph.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {:?} · {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`; the form of a linear layer with
    /// weights stored `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_nt")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt inner dimensions disagree: {:?} · {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what} shapes differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::dim(format!(
                "add_row: bias of {} values for rows of width {}",
                bv.len(),
                xv.cols()
            )));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::dim(format!(
                "mask of {} values for tensor of {}",
                mask.len(),
                xv.len()
            )));
        }
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaskMul(x, mask), rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let (data, op): (Vec<f64>, Op) = match kind {
            Activation::Tanh => (xv.data().iter().map(|v| v.tanh()).collect(), Op::Tanh(x)),
            Activation::Sigmoid => (
                xv.data().iter().map(|v| sigmoid(*v)).collect(),
                Op::Sigmoid(x),
            ),
        };
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || xv.shape()[axis] == 0 {
            return Err(Error::dim(format!(
                "softmax over empty or missing axis {axis} of shape {:?}",
                xv.shape()
            )));
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len)
                    .map(|j| src[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let compatible = av.rank() == bv.rank()
            && axis < av.rank()
            && av
                .shape()
                .iter()
                .zip(bv.shape())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::dim(format!(
                "cannot concat {:?} and {:?} along axis {axis}",
                av.shape(),
                bv.shape()
            )));
        }
        let (outer, la, inner) = split_axis(av.shape(), axis);
        let lb = bv.shape()[axis];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * la * inner..(o + 1) * la * inner]);
            data.extend_from_slice(&bv.data()[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = la + lb;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b, axis }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of width {n}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "rows")?;
        if start + len > m {
            return Err(Error::Index {
                index: start + len - 1,
                size: m,
            });
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rows { x, start }, rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let n = matrix_dims(self.value(*first), "concat_rows")?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = matrix_dims(self.value(*p), "concat_rows")?;
            if pn != n {
                return Err(Error::dim(format!(
                    "concat_rows: widths {n} and {pn} differ"
                )));
            }
            data.extend_from_slice(self.value(*p).data());
            m += pm;
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims(self.value(table), "gather_rows")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, size: v });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Summed cross-entropy of unnormalised `scores` (one row per
    /// prediction) against `gold` indices, fused with log-softmax.
    pub fn cross_entropy(&mut self, scores: Var, gold: &[usize]) -> Result<Var> {
        let sv = self.value(scores);
        let (rows, n) = (sv.rows(), sv.cols());
        if gold.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {} gold labels for {rows} rows",
                gold.len()
            )));
        }
        let mut total = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            if g >= n {
                return Err(Error::Index { index: g, size: n });
            }
            let row = sv.row(r);
            total += log_sum_exp(row) - row[g];
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                scores,
                gold: gold.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Additive scores `out[t, n] = Σ_j v_j · tanh(a[t, j] + b[n, j])`.
    pub fn additive_scores(&mut self, a: Var, b: Var, v: Var) -> Result<Var> {
        let (t, k) = matrix_dims(self.value(a), "additive_scores")?;
        let (n, k2) = matrix_dims(self.value(b), "additive_scores")?;
        if k != k2 || self.value(v).len() != k {
            return Err(Error::dim(format!(
                "additive_scores: {:?}, {:?} and v of {}",
                self.value(a).shape(),
                self.value(b).shape(),
                self.value(v).len()
            )));
        }
        let (ad, bd, vd) = (
            self.value(a).data(),
            self.value(b).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; t * n];
        for ti in 0..t {
            let arow = &ad[ti * k..(ti + 1) * k];
            for ni in 0..n {
                let brow = &bd[ni * k..(ni + 1) * k];
                out[ti * n + ni] = (0..k).map(|j| vd[j] * (arow[j] + brow[j]).tanh()).sum();
            }
        }
        let out = Tensor::new(vec![t, n], out)?;
        let rg = self.rg(&[a, b, v]);
        Ok(self.push(out, Op::Additive { a, b, v }, rg))
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], var: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.value(var).len();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA += dC · Bᵀ
                    gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB += Aᵀ · dC
                    gemm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA += dC · B
                    gemm_nn(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB += dCᵀ · A
                    gemm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                let c = out.cols();
                if let Some(gb) = self.acc(grads, *bias) {
                    for (j, s) in g.iter().enumerate() {
                        gb[j % c] += s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
                }
            }
            Op::MaskMul(x, mask) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let (outer, la, inner) = split_axis(self.value(*a).shape(), *axis);
                let lb = self.value(*b).shape()[*axis];
                let (sa, sb) = (la * inner, lb * inner);
                if let Some(ga) = self.acc(grads, *a) {
                    for o in 0..outer {
                        let src = &g[o * (sa + sb)..o * (sa + sb) + sa];
                        ga[o * sa..(o + 1) * sa]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for o in 0..outer {
                        let src = &g[o * (sa + sb) + sa..(o + 1) * (sa + sb)];
                        gb[o * sb..(o + 1) * sb]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).shape()[1];
                let (m, len) = (out.shape()[0], out.shape()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..m {
                        for c in 0..len {
                            gx[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::Rows { x, start } => {
                let n = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(dst, s)| *dst += s);
                    }
                }
            }
            Op::CrossEntropy { scores, gold } => {
                let sv = self.value(*scores);
                let n = sv.cols();
                if let Some(gs) = self.acc(grads, *scores) {
                    for (r, &gi) in gold.iter().enumerate() {
                        let row = sv.row(r);
                        let lse = log_sum_exp(row);
                        for j in 0..n {
                            let p = (row[j] - lse).exp();
                            let target = if j == gi { 1.0 } else { 0.0 };
                            gs[r * n + j] += g[0] * (p - target);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Additive { a, b, v } => {
                let (t, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[0];
                let (ad, bd, vd) = (
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*v).data(),
                );
                let mut da = vec![0.0; t * k];
                let mut db = vec![0.0; n * k];
                let mut dv = vec![0.0; k];
                for ti in 0..t {
                    for ni in 0..n {
                        let s = g[ti * n + ni];
                        if s == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let u = (ad[ti * k + j] + bd[ni * k + j]).tanh();
                            dv[j] += s * u;
                            let pre = s * vd[j] * (1.0 - u * u);
                            da[ti * k + j] += pre;
                            db[ni * k + j] += pre;
                        }
                    }
                }
                for (var, src) in [(a, da), (b, db), (v, dv)] {
                    if let Some(gv) = self.acc(grads, *var) {
                        gv.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scales every gradient in `store` so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || max_norm.is_nan() {
        return Err(Error::contract(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }
    Ok(norm)
}
