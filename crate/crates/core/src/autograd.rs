//! Dense `f64` matrices and a small reverse-mode tape covering the kernels
//! the recommender needs: masked scaled dot-product attention, LeakyReLU
//! affine layers, elementwise products, row/column concatenation and the
//! softplus used by the pairwise ranking loss.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! from the root visits every node once in reverse topological order.

use crate::error::{Error, Result};

/// Logit assigned to masked attention entries.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: data.len(), data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn scalar(v: f64) -> Self {
        Matrix { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn value(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Result of a forward attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `1 x d`.
    pub output: Matrix,
    /// One weight per key row; exactly zero where masked.
    pub weights: Vec<f64>,
}

/// `softmax(q K^T / sqrt(d)) V` for a single query row, with masked keys
/// sent to [`MASKED_LOGIT`].
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &[bool]) -> Result<AttentionOutput> {
    let d = q.cols;
    if q.rows != 1 || k.cols != d || k.rows != v.rows || mask.len() != k.rows {
        return Err(Error::Shape(format!(
            "attention q {:?} k {:?} v {:?} mask {}",
            q.shape(),
            k.shape(),
            v.shape(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyAttention);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (0..k.rows)
        .map(|i| if mask[i] { dot(q.row(0), k.row(i)) * scale } else { MASKED_LOGIT })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    let mut out = vec![0.0; v.cols];
    for (i, &w) in weights.iter().enumerate() {
        axpy(w, v.row(i), &mut out);
    }
    Ok(AttentionOutput { output: Matrix::row_vector(out), weights })
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// `LeakyReLU(W x^T + b)` for a row input. Returns `(output, pre_activation)`.
pub fn leaky_affine(x: &Matrix, w: &Matrix, b: &Matrix, slope: f64) -> Result<(Matrix, Vec<f64>)> {
    if x.rows != 1 || w.cols != x.cols || b.rows != 1 || b.cols != w.rows {
        return Err(Error::Shape(format!(
            "leaky_affine x {:?} w {:?} b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let pre: Vec<f64> = (0..w.rows).map(|j| dot(w.row(j), x.row(0)) + b.data[j]).collect();
    let out = pre.iter().map(|&p| leaky_relu(p, slope)).collect();
    Ok((Matrix::row_vector(out), pre))
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Row(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Vec<Var>),
    Softplus(Var),
    Attention { q: Var, k: Var, v: Var, weights: Vec<f64> },
    LeakyAffine { x: Var, w: Var, b: Var, slope: f64, pre: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last [`Graph::backward`], if any
    /// flowed there.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(&self.value(b).data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data.iter_mut().zip(&self.value(b).data) {
            *o -= y;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Adds the `1 x d` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).shape();
        if self.value(row).shape() != (1, ac) {
            return Err(Error::Shape(format!("add_row: {:?} + {:?}", (ar, ac), self.value(row).shape())));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data.clone();
        for i in 0..ar {
            for (o, x) in out.row_mut(i).iter_mut().zip(&r) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data.iter_mut().zip(&self.value(b).data) {
            *o *= y;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let m = self.value(a);
        if i >= m.rows {
            return Err(Error::Shape(format!("row {i} of {:?}", m.shape())));
        }
        let out = Matrix::row_vector(m.row(i).to_vec());
        Ok(self.push(out, Op::Row(a, i)))
    }

    /// Stacks `1 x d` rows into an `n x d` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let cols = rows.first().map_or(0, |&r| self.value(r).cols);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let m = self.value(r);
            if m.shape() != (1, cols) {
                return Err(Error::Shape(format!("stack_rows: {:?} vs (1, {cols})", m.shape())));
            }
            data.extend_from_slice(&m.data);
        }
        let out = Matrix { rows: rows.len(), cols, data };
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    /// Concatenates row vectors side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let m = self.value(p);
            if m.rows != 1 {
                return Err(Error::Shape(format!("concat_cols: {:?} is not a row", m.shape())));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(self.push(Matrix::row_vector(data), Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of `1 x 1` scalars.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &p in parts {
            let m = self.value(p);
            if m.shape() != (1, 1) {
                return Err(Error::Shape(format!("sum: {:?} is not a scalar", m.shape())));
            }
            total += m.data[0];
        }
        Ok(self.push(Matrix::scalar(total), Op::Sum(parts.to_vec())))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in &mut out.data {
            *o = softplus(*o);
        }
        self.push(out, Op::Softplus(a))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool]) -> Result<Var> {
        let AttentionOutput { output, weights } = attention(self.value(q), self.value(k), self.value(v), mask)?;
        Ok(self.push(output, Op::Attention { q, k, v, weights }))
    }

    /// Attention weights of an attention node.
    pub fn attention_weights(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn leaky_affine(&mut self, x: Var, w: Var, b: Var, slope: f64) -> Result<Var> {
        let (out, pre) = leaky_affine(self.value(x), self.value(w), self.value(b), slope)?;
        Ok(self.push(out, Op::LeakyAffine { x, w, b, slope, pre }))
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Matrix::zeros(node.value.rows, node.value.cols));
        grad.add_assign(g);
    }

    fn accumulate_row(&mut self, v: Var, row: usize, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| Matrix::zeros(node.value.rows, node.value.cols));
        for (a, b) in grad.row_mut(row).iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Reverse pass from a `1 x 1` root. Gradients from a previous pass are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Shape(format!("backward root {:?} is not a scalar", self.value(root).shape())));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(&op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, op: &Op, g: &Matrix) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, &g.data);
                self.accumulate(*b, &g.data);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, &g.data);
                let neg: Vec<f64> = g.data.iter().map(|x| -x).collect();
                self.accumulate(*b, &neg);
            }
            Op::AddRow(a, row) => {
                self.accumulate(*a, &g.data);
                let mut colsum = vec![0.0; g.cols];
                for i in 0..g.rows {
                    for (c, x) in colsum.iter_mut().zip(g.row(i)) {
                        *c += x;
                    }
                }
                self.accumulate(*row, &colsum);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.data.iter().zip(&self.value(*b).data).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data.iter().zip(&self.value(*a).data).map(|(x, y)| x * y).collect();
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::Row(a, i) => self.accumulate_row(*a, *i, &g.data),
            Op::StackRows(rows) => {
                for (i, &r) in rows.iter().enumerate() {
                    self.accumulate(r, g.row(i));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols;
                    self.accumulate(p, &g.data[offset..offset + width]);
                    offset += width;
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(p, &g.data);
                }
            }
            Op::Softplus(a) => {
                let ga: Vec<f64> = g.data.iter().zip(&self.value(*a).data).map(|(x, y)| x * sigmoid(*y)).collect();
                self.accumulate(*a, &ga);
            }
            Op::Attention { q, k, v, weights } => {
                let d = self.value(*q).cols;
                let scale = 1.0 / (d as f64).sqrt();
                let n = weights.len();
                // dL/dw_i = g . v_i ; softmax Jacobian gives dL/ds_i.
                let gw: Vec<f64> = (0..n).map(|i| dot(&g.data, self.value(*v).row(i))).collect();
                let mean = dot(weights, &gw);
                let gs: Vec<f64> = (0..n).map(|i| weights[i] * (gw[i] - mean)).collect();

                let (qv, kv) = (self.value(*q).data.clone(), self.value(*k).clone());
                let mut gq = vec![0.0; d];
                let mut gk = Matrix::zeros(n, d);
                let mut gv = Matrix::zeros(n, g.cols);
                for i in 0..n {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    axpy(gs[i] * scale, kv.row(i), &mut gq);
                    axpy(gs[i] * scale, &qv, gk.row_mut(i));
                    axpy(weights[i], &g.data, gv.row_mut(i));
                }
                self.accumulate(*q, &gq);
                self.accumulate(*k, &gk.data);
                self.accumulate(*v, &gv.data);
            }
            Op::LeakyAffine { x, w, b, slope, pre } => {
                let gpre: Vec<f64> = g
                    .data
                    .iter()
                    .zip(pre)
                    .map(|(gj, &p)| if p > 0.0 { *gj } else { gj * slope })
                    .collect();
                let xv = self.value(*x).data.clone();
                let wv = self.value(*w).clone();
                let mut gw = Matrix::zeros(wv.rows, wv.cols);
                let mut gx = vec![0.0; wv.cols];
                for (j, &gj) in gpre.iter().enumerate() {
                    if gj == 0.0 {
                        continue;
                    }
                    axpy(gj, &xv, gw.row_mut(j));
                    axpy(gj, wv.row(j), &mut gx);
                }
                self.accumulate(*w, &gw.data);
                self.accumulate(*b, &gpre);
                self.accumulate(*x, &gx);
            }
        }
    }
}

/// Maximum per-entry relative error between `analytic` and central finite
/// differences of `f` at `point`:
/// `|g_analytic - g_fd| / max(1e-8, |g_fd|)`.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "grad_check: {} parameters vs {} gradient entries",
            point.len(),
            analytic.len()
        )));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("grad_check entry {i}")));
        }
        let fd = (up - down) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
