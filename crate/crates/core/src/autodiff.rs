//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and enough information to run its
//! vector-Jacobian product. Nodes are appended in evaluation order, so walking
//! them backwards is a valid topological order for [`Graph::backward`].
//!
//! Parameters enter the graph through [`Graph::param`]; after `backward`,
//! [`Graph::accumulate_into`] adds their gradients to the owning
//! [`ParamStore`].

use std::collections::HashMap;

use crate::ctc;
use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Ctc {
        log_probs: Var,
        grad: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

fn shapes_equal(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn matrix_dims(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{op}: expected a matrix, got shape {s:?}")),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        // four rows of b per pass keep the output row in registers longer
        let mut p = 0;
        while p + 4 <= k {
            let w = [a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]];
            if w != [0.0; 4] {
                axpy4(out_row, w, &b[p * n..(p + 4) * n], n);
            }
            p += 4;
        }
        for p in p..k {
            if a_row[p] != 0.0 {
                axpy(out_row, a_row[p], &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = Vec::with_capacity(k * n);
    for p in 0..k {
        bt.extend((0..n).map(|j| b[j * k + p]));
    }
    gemm_nn(a, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let rows = &b[i * n..(i + 4) * n];
        for p in 0..k {
            let w = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            if w != [0.0; 4] {
                axpy4(&mut out[p * n..(p + 1) * n], w, rows, n);
            }
        }
        i += 4;
    }
    for i in i..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let w = a[i * k + p];
            if w != 0.0 {
                axpy(&mut out[p * n..(p + 1) * n], w, b_row);
            }
        }
    }
}

/// `out += w · x`
#[inline]
fn axpy(out: &mut [f64], w: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += w * v;
    }
}

/// `out += Σ_r w[r] · rows[r]` over four consecutive rows of length `n`.
#[inline]
fn axpy4(out: &mut [f64], w: [f64; 4], rows: &[f64], n: usize) {
    let (r0, rest) = rows.split_at(n);
    let (r1, rest) = rest.split_at(n);
    let (r2, r3) = rest.split_at(n);
    let out = &mut out[..n];
    let (r3, r2, r1, r0) = (&r3[..n], &r2[..n], &r1[..n], &r0[..n]);
    for j in 0..n {
        out[j] += w[0] * r0[j] + w[1] * r1[j] + w[2] * r2[j] + w[3] * r3[j];
    }
}

/// Softmax over `len` elements spaced `inner` apart, for each of `outer`
/// blocks. Uses max subtraction.
fn softmax_strided(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; x.numel()];
    softmax_strided(x.data(), &mut out, outer, len, inner);
    Tensor::new(x.shape().to_vec(), out)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
    }
    let len = shape[axis];
    if len == 0 {
        return dim_err(format!("softmax over empty axis {axis}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, len, inner))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call's output with respect to `v`.
    /// Only leaves (constants and parameters) keep their gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that receives gradients (used by finite-difference tests).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// Brings a stored parameter into the graph. Repeated calls return the same
    /// node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return dim_err(format!(
                "matmul: inner dimensions disagree for {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_t")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_t")?;
        if k != k2 {
            return dim_err(format!(
                "matmul_t: inner dimensions disagree for {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        shapes_equal(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a `[d]` row vector to every row of `x: [..×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(row).numel() != d {
            return dim_err(format!(
                "add_row: row {:?} does not broadcast over {:?}",
                self.shape(row),
                self.shape(x)
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(d) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        shapes_equal(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let mut out = vec![0.0; self.value(x).numel()];
        softmax_strided(self.value(x).data(), &mut out, outer, len, inner);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).cols();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Layer normalization over the last axis followed by a per-feature affine
    /// map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 {
            return dim_err("layer_norm over an empty feature axis");
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} do not match feature size {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of `table: [V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims(self.value(table), "embedding")?;
        if ids.is_empty() {
            return dim_err("embedding lookup with no ids");
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.value(x), "slice_cols")?;
        if len == 0 || start + len > cols {
            return dim_err(format!(
                "slice_cols: [{start}, {}) out of range for {:?}",
                start + len,
                self.shape(x)
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols of nothing");
        };
        let (rows, _) = matrix_dims(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_cols")?;
            if r != rows {
                return dim_err(format!(
                    "concat_cols: row counts differ ({:?} vs {:?})",
                    self.shape(first),
                    self.shape(p)
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// CTC negative log-likelihood of `target` given per-frame log
    /// probabilities `[T×V]`. Blank is id 0.
    pub fn ctc_loss(&mut self, log_probs: Var, target: &[usize]) -> Result<Var> {
        let out = ctc::ctc_loss(self.value(log_probs), target)?;
        let rg = self.rg(log_probs);
        Ok(self.push(
            Tensor::scalar(out.loss),
            Op::Ctc {
                log_probs,
                grad: out.grad,
            },
            rg,
        ))
    }

    fn accum(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut g, &self.nodes);
        self.grads[v.0] = Some(g);
    }

    /// Backpropagates from the scalar `output`. Intermediate gradients are
    /// released as soon as they have been propagated; leaf gradients remain
    /// readable through [`Graph::grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let out_val = self.value(output);
        if out_val.numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            ));
        }
        if !out_val.data()[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "output value {} is not finite",
                out_val.data()[0]
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Constant | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            // Temporarily move the op out so the node table can be borrowed.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.cols();
                let (a, b) = (*a, *b);
                self.accum(a, |ga, nodes| {
                    // dA = G · Bᵀ
                    gemm_nt(g, nodes[b.0].value.data(), ga, m, n, k);
                });
                self.accum(b, |gb, nodes| {
                    // dB = Aᵀ · G
                    gemm_tn(nodes[a.0].value.data(), g, gb, m, k, n);
                });
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.rows();
                let (a, b) = (*a, *b);
                self.accum(a, |ga, nodes| {
                    // dA = G · B
                    gemm_nn(g, nodes[b.0].value.data(), ga, m, n, k);
                });
                self.accum(b, |gb, nodes| {
                    // dB = Gᵀ · A
                    gemm_tn(g, nodes[a.0].value.data(), gb, m, n, k);
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accum(v, |gv, _| add_into(gv, g));
                }
            }
            Op::AddRow(x, row) => {
                self.accum(*x, |gx, _| add_into(gx, g));
                self.accum(*row, |gr, _| {
                    let d = gr.len();
                    for chunk in g.chunks(d) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, |ga, nodes| {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(nodes[b.0].value.data()) {
                        *o += gv * bv;
                    }
                });
                self.accum(b, |gb, nodes| {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(nodes[a.0].value.data()) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, f) => {
                let f = *f;
                self.accum(*x, |gx, _| {
                    for (o, gv) in gx.iter_mut().zip(g) {
                        *o += f * gv;
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                self.accum(x, |gx, nodes| {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                self.accum(*x, |gx, nodes| {
                    let y = nodes[i].value.data();
                    for o in 0..outer {
                        for c in 0..inner {
                            let base = o * len * inner + c;
                            let mut dotp = 0.0;
                            for j in 0..len {
                                dotp += g[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] += y[idx] * (g[idx] - dotp);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                self.accum(*x, |gx, nodes| {
                    let y = &nodes[i].value;
                    let d = y.cols();
                    for r in 0..y.rows() {
                        let gr = &g[r * d..(r + 1) * d];
                        let total: f64 = gr.iter().sum();
                        for (j, &lp) in y.row(r).iter().enumerate() {
                            gx[r * d + j] += gr[j] - lp.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = xhat.len() / rstd.len();
                let gamma_v = *gamma;
                self.accum(*x, |gx, nodes| {
                    let gam = nodes[gamma_v.0].value.data();
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..d {
                            let v = g[r * d + j] * gam[j];
                            dxhat[j] = v;
                            mean_d += v;
                            mean_dx += v * xhat[r * d + j];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                        }
                    }
                });
                self.accum(*gamma, |gg, _| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.accum(*beta, |gb, _| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                self.accum(*table, |gt, nodes| {
                    let d = nodes[table.0].value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let start = *start;
                self.accum(*x, |gx, nodes| {
                    let cols = nodes[x.0].value.cols();
                    let len = nodes[i].value.cols();
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.accum(p, |gp, _| {
                        for (r, gr) in gp.chunks_mut(w).enumerate() {
                            add_into(gr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accum(*x, |gx, _| gx.iter_mut().for_each(|o| *o += s));
            }
            Op::Ctc { log_probs, grad } => {
                let s = g[0];
                self.accum(*log_probs, |gx, _| {
                    for (o, gv) in gx.iter_mut().zip(grad) {
                        *o += s * gv;
                    }
                });
            }
        }
    }

    /// Adds parameter gradients from the last `backward` into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            let Some(g) = self.grads[v.0].as_ref() else {
                continue;
            };
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{}` contains {bad}",
                    store.get(id).name
                )));
            }
            add_into(&mut store.get_mut(id).grad, g);
        }
        Ok(())
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
