//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward sweep is a single reverse pass.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::{gelu_scalar, gelu_scalar_derivative, COSINE_EPS};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddColBias(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Transpose(Var),
    Cosine(Var, Var),
    CosineMatrix(Var),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ShiftCols(Var, isize),
    LayerNormCols(Var, f64),
    MaskedRowLogSumExp(Var),
    WeightedEntries(Var, Vec<(usize, usize, f64)>),
    /// Scalar whose gradient with respect to its input was computed alongside the value.
    ScalarWithGrad(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of its shape if nothing flowed into it.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => {
                let val = tape.value(v);
                Tensor::new(val.shape().to_vec(), vec![0.0; val.len()]).expect("shape")
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.adjoints[v.0].take()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dim(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data).expect("shape")
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    /// Trainable input: gradients flow into it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that follows `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    /// Constant input: never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = zip_with(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a (r×c) + bias (r×1)` broadcast across columns.
    pub fn add_col_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != av.rows() || bv.cols() != 1 {
            return Err(Error::dim(format!(
                "bias {}x{} for {}x{}",
                bv.rows(),
                bv.cols(),
                av.rows(),
                av.cols()
            )));
        }
        let mut v = av.clone();
        v.requires_grad = false;
        let cols = v.cols();
        for r in 0..v.rows() {
            let b = bv.get(r, 0);
            for c in 0..cols {
                let x = v.get(r, c);
                v.set(r, c, x + b);
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(v, Op::AddColBias(a, bias), ng))
    }

    /// `a (r×c) * gain (r×1)` broadcast across columns.
    pub fn scale_rows(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (av, gv) = (self.value(a), self.value(gain));
        if gv.rows() != av.rows() || gv.cols() != 1 {
            return Err(Error::dim("row gain must be r×1"));
        }
        let mut v = av.clone();
        v.requires_grad = false;
        let cols = v.cols();
        for r in 0..v.rows() {
            let g = gv.get(r, 0);
            for c in 0..cols {
                let x = v.get(r, c);
                v.set(r, c, x * g);
            }
        }
        let ng = self.ng(a) || self.ng(gain);
        Ok(self.push(v, Op::ScaleRows(a, gain), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_scalar);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        Ok(self.push(v, Op::Log(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    /// Cosine similarity of two equally sized tensors treated as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = super::cosine_similarity(self.value(a).data(), self.value(b).data())?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), ng))
    }

    /// Pairwise cosine similarity between the columns of `z (F×L)`, giving `L×L`.
    pub fn cosine_matrix(&mut self, z: Var) -> Result<Var> {
        let zv = self.value(z);
        let gram = matmul_tn(zv, zv)?;
        let l = gram.rows();
        let norms: Vec<f64> = (0..l).map(|i| gram.get(i, i).max(0.0).sqrt()).collect();
        let mut out = gram;
        for i in 0..l {
            for j in 0..l {
                let g = out.get(i, j);
                out.set(i, j, g / (norms[i] * norms[j] + COSINE_EPS));
            }
        }
        let ng = self.ng(z);
        Ok(self.push(out, Op::CosineMatrix(z), ng))
    }

    /// Gathers columns by index; indices may repeat (gradients scatter-add).
    pub fn select_cols(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.cols()) {
            return Err(Error::dim(format!("column {bad} of {}", av.cols())));
        }
        let v = av.select_columns(&indices);
        let ng = self.ng(a);
        Ok(self.push(v, Op::SelectCols(a, indices), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::pre("concat of zero tensors")),
        };
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dim("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            for r in 0..rows {
                for c in 0..pv.cols() {
                    out.set(r, off + c, pv.get(r, c));
                }
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `out[:, t] = a[:, t - offset]`, zero where out of range.
    pub fn shift_cols(&mut self, a: Var, offset: isize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(rows, cols);
        for t in 0..cols {
            let src = t as isize - offset;
            if src >= 0 && (src as usize) < cols {
                for r in 0..rows {
                    out.set(r, t, av.get(r, src as usize));
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ShiftCols(a, offset), ng)
    }

    /// Standardises each column over its rows (no affine part).
    pub fn layer_norm_cols(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = Tensor::zeros(rows, cols);
        for c in 0..cols {
            let mean = (0..rows).map(|r| av.get(r, c)).sum::<f64>() / rows as f64;
            let var = (0..rows)
                .map(|r| (av.get(r, c) - mean).powi(2))
                .sum::<f64>()
                / rows as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for r in 0..rows {
                out.set(r, c, (av.get(r, c) - mean) * inv);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormCols(a, eps), ng)
    }

    /// For a square `s`, returns the `L×1` column `log Σ_{j≠i} exp s[i][j]`.
    pub fn masked_row_logsumexp(&mut self, s: Var) -> Result<Var> {
        let sv = self.value(s);
        let l = sv.rows();
        if sv.cols() != l {
            return Err(Error::dim("masked_row_logsumexp needs a square matrix"));
        }
        if l < 2 {
            return Err(Error::pre("need at least two columns for a distractor set"));
        }
        let out: Vec<f64> = (0..l)
            .map(|i| {
                let row = sv.row_slice(i);
                let m = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &x)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &x)| (x - m).exp())
                    .sum();
                m + s.ln()
            })
            .collect();
        let ng = self.ng(s);
        Ok(self.push(Tensor::column(out), Op::MaskedRowLogSumExp(s), ng))
    }

    /// `Σ w · s[i][j]` over the listed entries.
    pub fn weighted_entries(&mut self, s: Var, entries: Vec<(usize, usize, f64)>) -> Result<Var> {
        let sv = self.value(s);
        let mut acc = 0.0;
        for &(i, j, w) in &entries {
            if i >= sv.rows() || j >= sv.cols() {
                return Err(Error::dim(format!("entry ({i},{j}) out of range")));
            }
            acc += w * sv.get(i, j);
        }
        let ng = self.ng(s);
        Ok(self.push(Tensor::scalar(acc), Op::WeightedEntries(s, entries), ng))
    }

    /// Records a scalar `value` of `a` together with its precomputed `∂value/∂a`.
    pub fn scalar_with_grad(&mut self, a: Var, value: f64, grad: Tensor) -> Result<Var> {
        same_shape(self.value(a), &grad, "scalar_with_grad")?;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad(a, grad), ng))
    }

    /// Reverse sweep from a scalar output. Each node is visited once.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(adj, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(adj, *a, zip_with(g, self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, zip_with(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::AddColBias(a, bias) => {
                self.accumulate(adj, *a, g.clone());
                if self.ng(*bias) {
                    let sums = (0..g.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
                    self.accumulate(adj, *bias, Tensor::column(sums));
                }
            }
            Op::ScaleRows(a, gain) => {
                let (av, gv) = (self.value(*a), self.value(*gain));
                if self.ng(*a) {
                    let mut da = g.clone();
                    let cols = da.cols();
                    for r in 0..da.rows() {
                        let w = gv.get(r, 0);
                        for c in 0..cols {
                            let x = da.get(r, c);
                            da.set(r, c, x * w);
                        }
                    }
                    self.accumulate(adj, *a, da);
                }
                if self.ng(*gain) {
                    let sums = (0..g.rows())
                        .map(|r| {
                            g.row_slice(r)
                                .iter()
                                .zip(av.row_slice(r))
                                .map(|(x, y)| x * y)
                                .sum()
                        })
                        .collect();
                    self.accumulate(adj, *gain, Tensor::column(sums));
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.map(|x| x * s)),
            Op::Gelu(a) => {
                let d = zip_with(g, self.value(*a), |up, x| up * gelu_scalar_derivative(x));
                self.accumulate(adj, *a, d);
            }
            Op::Exp(a) => {
                let d = zip_with(g, &node.value, |up, y| up * y);
                self.accumulate(adj, *a, d);
            }
            Op::Log(a) => {
                let d = zip_with(g, self.value(*a), |up, x| up / x);
                self.accumulate(adj, *a, d);
            }
            Op::Sum(a) => {
                let up = g.data()[0];
                let av = self.value(*a);
                let d = Tensor::new(av.shape().to_vec(), vec![up; av.len()])?;
                self.accumulate(adj, *a, d);
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()),
            Op::Cosine(a, b) => {
                let up = g.data()[0];
                let (av, bv) = (self.value(*a), self.value(*b));
                let (da, db) = cosine_vector_grads(av.data(), bv.data());
                if self.ng(*a) {
                    let t = Tensor::new(av.shape().to_vec(), da.iter().map(|x| x * up).collect())?;
                    self.accumulate(adj, *a, t);
                }
                if self.ng(*b) {
                    let t = Tensor::new(bv.shape().to_vec(), db.iter().map(|x| x * up).collect())?;
                    self.accumulate(adj, *b, t);
                }
            }
            Op::CosineMatrix(z) => {
                let d = cosine_matrix_backward(self.value(*z), g)?;
                self.accumulate(adj, *z, d);
            }
            Op::SelectCols(a, indices) => {
                let av = self.value(*a);
                let mut d = Tensor::zeros(av.rows(), av.cols());
                for (k, &c) in indices.iter().enumerate() {
                    for r in 0..av.rows() {
                        let x = d.get(r, c);
                        d.set(r, c, x + g.get(r, k));
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.ng(p) {
                        let idx: Vec<usize> = (off..off + pv.cols()).collect();
                        self.accumulate(adj, p, g.select_columns(&idx));
                    }
                    off += pv.cols();
                }
            }
            Op::ShiftCols(a, offset) => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut d = Tensor::zeros(rows, cols);
                for t in 0..cols {
                    let src = t as isize - offset;
                    if src >= 0 && (src as usize) < cols {
                        for r in 0..rows {
                            d.set(r, src as usize, g.get(r, t));
                        }
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::LayerNormCols(a, eps) => {
                let av = self.value(*a);
                let y = &node.value;
                let (rows, cols) = (av.rows(), av.cols());
                let n = rows as f64;
                let mut d = Tensor::zeros(rows, cols);
                for c in 0..cols {
                    let mean = (0..rows).map(|r| av.get(r, c)).sum::<f64>() / n;
                    let var = (0..rows)
                        .map(|r| (av.get(r, c) - mean).powi(2))
                        .sum::<f64>()
                        / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_g = (0..rows).map(|r| g.get(r, c)).sum::<f64>() / n;
                    let mean_gy = (0..rows).map(|r| g.get(r, c) * y.get(r, c)).sum::<f64>() / n;
                    for r in 0..rows {
                        d.set(r, c, inv * (g.get(r, c) - mean_g - y.get(r, c) * mean_gy));
                    }
                }
                self.accumulate(adj, *a, d);
            }
            Op::MaskedRowLogSumExp(s) => {
                let sv = self.value(*s);
                let l = sv.rows();
                let mut d = Tensor::zeros(l, l);
                for i in 0..l {
                    let up = g.get(i, 0);
                    if up == 0.0 {
                        continue;
                    }
                    let lse = node.value.get(i, 0);
                    for j in 0..l {
                        if j != i {
                            d.set(i, j, up * (sv.get(i, j) - lse).exp());
                        }
                    }
                }
                self.accumulate(adj, *s, d);
            }
            Op::WeightedEntries(s, entries) => {
                let up = g.data()[0];
                let sv = self.value(*s);
                let mut d = Tensor::zeros(sv.rows(), sv.cols());
                for &(i, j, w) in entries {
                    let x = d.get(i, j);
                    d.set(i, j, x + up * w);
                }
                self.accumulate(adj, *s, d);
            }
            Op::ScalarWithGrad(a, grad) => {
                let up = g.data()[0];
                self.accumulate(adj, *a, grad.map(|x| x * up));
            }
        }
        Ok(())
    }
}

fn cosine_vector_grads(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na * nb + COSINE_EPS;
    let one = |x: &[f64], y: &[f64], nx: f64, ny: f64| -> Vec<f64> {
        x.iter()
            .zip(y)
            .map(|(&xi, &yi)| {
                let dn = if nx > 0.0 { xi / nx } else { 0.0 };
                yi / den - dot * ny * dn / (den * den)
            })
            .collect()
    };
    (one(a, b, na, nb), one(b, a, nb, na))
}

/// Backward of `cos[i][j] = G[i][j] / (n_i n_j + ε)` with `G = zᵀz`, `n_i = √G[i][i]`.
fn cosine_matrix_backward(z: &Tensor, up: &Tensor) -> Result<Tensor> {
    let gram = matmul_tn(z, z)?;
    let l = gram.rows();
    let norms: Vec<f64> = (0..l).map(|i| gram.get(i, i).max(0.0).sqrt()).collect();
    // direct[i][j] = ∂L/∂G[i][j] through the numerator; norm_grad[k] = ∂L/∂n_k.
    let mut direct = Tensor::zeros(l, l);
    let mut norm_grad = vec![0.0; l];
    for i in 0..l {
        for j in 0..l {
            let a = up.get(i, j);
            if a == 0.0 {
                continue;
            }
            let d = norms[i] * norms[j] + COSINE_EPS;
            direct.set(i, j, a / d);
            let k = -a * gram.get(i, j) / (d * d);
            norm_grad[i] += k * norms[j];
            norm_grad[j] += k * norms[i];
        }
    }
    let sym = {
        let t = direct.transpose();
        zip_with(&direct, &t, |x, y| x + y)
    };
    let mut dz = matmul(z, &sym)?;
    for k in 0..l {
        if norms[k] > 0.0 {
            let s = norm_grad[k] / norms[k];
            for r in 0..z.rows() {
                let x = dz.get(r, k);
                dz.set(r, k, x + s * z.get(r, k));
            }
        }
    }
    Ok(dz)
}
