//! Reverse-mode differentiation over whole tensors.
//!
//! Every primitive records its output value and the indices of its inputs.
//! `backward` walks the records once in reverse, accumulating adjoints only
//! for nodes that depend on a parameter.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Softmax(usize),
    /// Keeps the per-row inverse standard deviation.
    LayerNorm(usize, Vec<f64>),
    Gelu(usize),
    Tanh(usize),
    Sum(usize),
    /// Keeps the per-row L2 norms.
    Cosine(usize, f64, Vec<f64>),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Cosine(..) => "cosine_matrix",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of tensor operations.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Adjoints produced by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_raw(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push(v);
        v
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var, NumericsError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Tensor::from_raw(shape, data), op, requires_grad))
    }

    fn inputs_of(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Cosine(a, _, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.record(self.value(a).shape().to_vec(), data, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.record(self.value(a).shape().to_vec(), data, Op::Sub(a.0, b.0))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.record(self.value(a).shape().to_vec(), data, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        self.record(self.value(a).shape().to_vec(), data, Op::Scale(a.0, factor))
    }

    /// Adds a row vector (`[cols]` or `[1, cols]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (_, cols) = as_matrix(self.value(a));
        let r = self.value(row);
        if r.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: r.shape().to_vec(),
            });
        }
        let rd = r.data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(rd).map(|(x, y)| x + y))
            .collect();
        self.record(self.value(a).shape().to_vec(), data, Op::AddRow(a.0, row.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = as_matrix(self.value(a));
        let (k2, n) = as_matrix(self.value(b));
        if k != k2 || self.value(a).shape().len() != 2 || self.value(b).shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record(vec![m, n], data, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = as_matrix(self.value(a));
        let src = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        self.record(vec![n, m], data, Op::Transpose(a.0))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (_, n) = as_matrix(self.value(a));
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.record(self.value(a).shape().to_vec(), data, Op::Softmax(a.0))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        let (_, n) = as_matrix(self.value(a));
        let mut data = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.record(self.value(a).shape().to_vec(), data, Op::LayerNorm(a.0, inv_std))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.record(self.value(a).shape().to_vec(), data, Op::Gelu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        self.record(self.value(a).shape().to_vec(), data, Op::Tanh(a.0))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let total = self.value(a).data().iter().sum();
        self.record(Vec::new(), vec![total], Op::Sum(a.0))
    }

    /// Pairwise row cosine similarities, `[n, c] -> [n, n]`.
    ///
    /// `eps` is added to each norm, so a zero row has similarity 0 with
    /// everything.
    pub fn cosine_matrix(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        let (n, c) = as_matrix(self.value(a));
        let src = self.value(a).data();
        let norms: Vec<f64> = src
            .chunks(c)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut unit = src.to_vec();
        for (row, norm) in unit.chunks_mut(c).zip(&norms) {
            for v in row.iter_mut() {
                *v /= norm + eps;
            }
        }
        let data = matmul_nt(&unit, &unit, n, c, n);
        self.record(vec![n, n], data, Op::Cosine(a.0, eps, norms))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, n) = as_matrix(self.value(a));
        if start + len > n {
            return Err(NumericsError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of {n}", start + len),
            });
        }
        let data = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.record(vec![m, len], data, Op::SliceCols(a.0, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let m = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(NumericsError::InvalidArgument {
                op: "concat_cols",
                msg: "parts must be non-empty with equal row counts".into(),
            });
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.record(vec![m, total], data, Op::ConcatCols(ids))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (m, n) = as_matrix(self.value(a));
        if start + len > m {
            return Err(NumericsError::InvalidArgument {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {m}", start + len),
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.record(vec![len, n], data, Op::SliceRows(a.0, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let n = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        if parts.is_empty() || parts.iter().any(|&p| self.value(p).cols() != n) {
            return Err(NumericsError::InvalidArgument {
                op: "concat_rows",
                msg: "parts must be non-empty with equal column counts".into(),
            });
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            rows += self.value(p).rows();
            data.extend_from_slice(self.value(p).data());
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.record(vec![rows, n], data, Op::ConcatRows(ids))
    }

    /// Propagates adjoints from the scalar `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(
        &self,
        op: &'static str,
        grads: &mut [Option<Vec<f64>>],
        target: usize,
        delta: Vec<f64>,
    ) -> Result<(), NumericsError> {
        if !self.nodes[target].requires_grad {
            return Ok(());
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op });
        }
        match &mut grads[target] {
            Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<(), NumericsError> {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let op = node.op.name();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(op, grads, *a, g.to_vec())?;
                self.accumulate(op, grads, *b, g.to_vec())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(op, grads, *a, g.to_vec())?;
                self.accumulate(op, grads, *b, g.iter().map(|v| -v).collect())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                self.accumulate(op, grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect())?;
                self.accumulate(op, grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect())?;
            }
            Op::Scale(a, f) => {
                self.accumulate(op, grads, *a, g.iter().map(|v| v * f).collect())?;
            }
            Op::AddRow(a, r) => {
                self.accumulate(op, grads, *a, g.to_vec())?;
                let cols = node.value.cols();
                let mut rg = vec![0.0; cols];
                for chunk in g.chunks(cols) {
                    rg.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                }
                self.accumulate(op, grads, *r, rg)?;
            }
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(&self.nodes[*a].value);
                let n = node.value.cols();
                if self.nodes[*a].requires_grad {
                    let da = matmul_nt(g, self.nodes[*b].value.data(), m, n, k);
                    self.accumulate(op, grads, *a, da)?;
                }
                if self.nodes[*b].requires_grad {
                    let db = matmul_tn(self.nodes[*a].value.data(), g, m, k, n);
                    self.accumulate(op, grads, *b, db)?;
                }
            }
            Op::Transpose(a) => {
                // output is [n, m]; input is [m, n]
                let (n, m) = as_matrix(&node.value);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                self.accumulate(op, grads, *a, da)?;
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut da = vec![0.0; g.len()];
                for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((d, gv), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (gv - dot);
                    }
                }
                self.accumulate(op, grads, *a, da)?;
            }
            Op::LayerNorm(a, inv_std) => {
                let n = node.value.cols();
                let nf = n as f64;
                let mut da = vec![0.0; g.len()];
                for (r, ((drow, grow), xhat)) in da
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(out.chunks(n))
                    .enumerate()
                {
                    let mean_g = grow.iter().sum::<f64>() / nf;
                    let mean_gx = grow.iter().zip(xhat).map(|(x, y)| x * y).sum::<f64>() / nf;
                    for ((d, gv), xh) in drow.iter_mut().zip(grow).zip(xhat) {
                        *d = inv_std[r] * (gv - mean_g - xh * mean_gx);
                    }
                }
                self.accumulate(op, grads, *a, da)?;
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data();
                self.accumulate(op, grads, *a, g.iter().zip(x).map(|(gv, &xv)| gv * gelu_deriv(xv)).collect())?;
            }
            Op::Tanh(a) => {
                self.accumulate(op, grads, *a, g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect())?;
            }
            Op::Sum(a) => {
                let len = self.nodes[*a].value.len();
                self.accumulate(op, grads, *a, vec![g[0]; len])?;
            }
            Op::Cosine(a, eps, norms) => {
                let x = self.nodes[*a].value.data();
                let (n, c) = as_matrix(&self.nodes[*a].value);
                // out = U U^T with U = rows scaled by 1/(norm + eps)
                let mut unit = x.to_vec();
                for (row, norm) in unit.chunks_mut(c).zip(norms) {
                    row.iter_mut().for_each(|v| *v /= norm + eps);
                }
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = g[i * n + j] + g[j * n + i];
                    }
                }
                let gu = matmul(&sym, &unit, n, n, c);
                let mut da = vec![0.0; n * c];
                for r in 0..n {
                    let norm = norms[r];
                    let denom = norm + eps;
                    let xr = &x[r * c..(r + 1) * c];
                    let gr = &gu[r * c..(r + 1) * c];
                    let proj = if norm > 0.0 {
                        xr.iter().zip(gr).map(|(p, q)| p * q).sum::<f64>() / (norm * denom * denom)
                    } else {
                        0.0
                    };
                    for ((d, gv), xv) in da[r * c..(r + 1) * c].iter_mut().zip(gr).zip(xr) {
                        *d = gv / denom - xv * proj;
                    }
                }
                self.accumulate(op, grads, *a, da)?;
            }
            Op::SliceCols(a, start) => {
                let (m, n) = as_matrix(&self.nodes[*a].value);
                let len = node.value.cols();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(op, grads, *a, da)?;
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.accumulate(op, grads, p, dp)?;
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let n = node.value.cols();
                let mut da = vec![0.0; self.nodes[*a].value.len()];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                self.accumulate(op, grads, *a, da)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.accumulate(op, grads, p, g[offset..offset + len].to_vec())?;
                    offset += len;
                }
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}
