//! Reverse-mode automatic differentiation over an explicit operation tape.
//!
//! A [`Tape`] records every operation in creation order; [`Tape::backward`]
//! walks the records in reverse, accumulating gradients additively so fan-out
//! is handled exactly. One tape is built per forward pass and discarded after
//! the gradients have been read out.

use crate::error::{Result, TensorError};
use crate::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MulScalar { x: Var, s: Var },
    Abs { x: Var },
    Relu { x: Var },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Min { a: Var, b: Var },
    Max { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Matrix view: (rows, cols) for a 2-D shape.
fn mat_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() == 2 {
        Ok((shape[0], shape[1]))
    } else {
        Err(TensorError::BadShape {
            op,
            expected: "2-D matrix",
            got: shape.to_vec(),
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves and access ───────────────────────────────────────────────

    /// Leaf that participates in gradient computation.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        self.leaf_inner(data, shape, true)
    }

    /// Leaf excluded from gradient computation (masks, frozen features, ...).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Var> {
        self.leaf_inner(data, shape, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.leaf_inner(vec![value], vec![1], false)
            .expect("scalar leaf")
    }

    fn leaf_inner(&mut self, data: Vec<f64>, shape: Vec<usize>, grad: bool) -> Result<Var> {
        if data.len() != numel(&shape) {
            return Err(TensorError::DataLength {
                op: "leaf",
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, grad, Op::Leaf))
    }

    pub fn from_tensor(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        self.push(t.data.clone(), t.shape.clone(), needs_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            data: self.nodes[v.0].data.clone(),
            shape: self.nodes[v.0].shape.clone(),
        }
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(numel(&self.nodes[v.0].shape), 1);
        self.nodes[v.0].data[0]
    }

    pub fn assert_finite(&self, v: Var, ctx: &str) -> Result<()> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { ctx: ctx.to_string() })
        }
    }

    // ── Arithmetic ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = mat_dims("matmul", self.shape(a))?;
        let (kb, n) = mat_dims("matmul", self.shape(b))?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), m, ka, n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], needs, Op::MatMul { a, b }))
    }

    fn elementwise2(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("minimum", a, b, f64::min, Op::Min { a, b })
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2("maximum", a, b, f64::max, Op::Max { a, b })
    }

    /// Broadcast-add a row vector over the last axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(row) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rvals = self.value(row).to_vec();
        let data: Vec<f64> = self.value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rvals[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(data, shape, needs, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(data, shape, needs, Op::Scale { x, c })
    }

    /// Multiply a tensor by a single-element tensor (broadcast scalar).
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(TensorError::BadShape {
                op: "mul_scalar",
                expected: "single-element scalar",
                got: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let data: Vec<f64> = self.value(x).iter().map(|&v| sv * v).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(data, shape, needs, Op::MulScalar { x, s }))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(data, shape, needs, op)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu_fwd, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis { axis, shape });
        }
        let mut data = self.value(x).to_vec();
        for_each_lane(&shape, axis, |idx| {
            let m = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in idx {
                data[i] = (data[i] - m).exp();
                sum += data[i];
            }
            for &i in idx {
                data[i] /= sum;
            }
        });
        let needs = self.needs(x);
        Ok(self.push(data, shape, needs, Op::Softmax { x, axis }))
    }

    /// Per-row layer normalization over the last axis, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(TensorError::BadShape {
            op: "layer_norm",
            expected: "at least 1-D",
            got: shape.clone(),
        })?;
        for v in [gain, bias] {
            if self.shape(v) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let rows = numel(&shape) / n;
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, shape, needs, Op::LayerNorm { x, gain, bias, eps }))
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        let (_, cols) = mat_dims("concat_rows", self.shape(parts[0]))?;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = mat_dims("concat_rows", self.shape(p))?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_rows += r;
        }
        let mut data = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![total_rows, cols],
            needs,
            Op::ConcatRows { parts: parts.to_vec() },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        let (rows, _) = mat_dims("concat_cols", self.shape(parts[0]))?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = mat_dims("concat_cols", self.shape(p))?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = mat_dims("concat_cols", self.shape(p))?;
            let pv = self.value(p);
            for r in 0..rows {
                data[r * total_cols + offset..r * total_cols + offset + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            data,
            vec![rows, total_cols],
            needs,
            Op::ConcatCols { parts: parts.to_vec() },
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = mat_dims("slice_rows", self.shape(x))?;
        if start + len > rows {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                size: rows,
            });
        }
        let data = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, vec![len, cols], needs, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = mat_dims("slice_cols", self.shape(x))?;
        if start + len > cols {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                size: cols,
            });
        }
        let xv = self.value(x);
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len]
                .copy_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(data, vec![rows, len], needs, Op::SliceCols { x, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = mat_dims("transpose", self.shape(x))?;
        let xv = self.value(x);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = xv[r * cols + c];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(data, vec![cols, rows], needs, Op::Transpose { x }))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(vec![s], vec![1], needs, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = numel(self.shape(x)) as f64;
        let s: f64 = self.value(x).iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(vec![s], vec![1], needs, Op::MeanAll { x })
    }

    // ── Lookups and losses ──────────────────────────────────────────────

    /// Gather rows of `table` by id; duplicates accumulate gradient.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = mat_dims("embed", self.shape(table))?;
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embed",
                    index: id,
                    size: vocab,
                });
            }
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            data,
            vec![ids.len(), dim],
            needs,
            Op::Embed { table, ids: ids.to_vec() },
        ))
    }

    /// Mean token cross-entropy over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = mat_dims("cross_entropy", self.shape(logits))?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(TensorError::EmptyInput { op: "cross_entropy" });
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    size: cols,
                });
            }
        }
        let lv = self.value(logits);
        let mut loss = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &lv[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
        }
        loss /= active as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively;
    /// each node is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.step_backward(i, &op);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.0].data.len();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    fn add_to_grad(&mut self, v: Var, contrib: &[f64]) {
        if !self.needs(v) {
            return;
        }
        let buf = self.grad_buf(v);
        for (g, c) in buf.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn step_backward(&mut self, i: usize, op: &Op) {
        let g = self.nodes[i].grad.clone().expect("grad present");
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = self.shape(*a)[1];
                if self.needs(*a) {
                    let bv = self.nodes[b.0].data.clone();
                    let buf = self.grad_buf(*a);
                    let mut da = std::mem::take(buf);
                    matmul_nt_acc(&g, &bv, m, n, k, &mut da);
                    *self.grad_buf(*a) = da;
                }
                if self.needs(*b) {
                    let av = self.nodes[a.0].data.clone();
                    let buf = self.grad_buf(*b);
                    let mut db = std::mem::take(buf);
                    matmul_tn_acc(&av, &g, k, m, n, &mut db);
                    *self.grad_buf(*b) = db;
                }
            }
            Op::Add { a, b } => {
                self.add_to_grad(*a, &g);
                self.add_to_grad(*b, &g);
            }
            Op::Sub { a, b } => {
                self.add_to_grad(*a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_to_grad(*b, &neg);
            }
            Op::AddRow { x, row } => {
                self.add_to_grad(*x, &g);
                if self.needs(*row) {
                    let n = self.nodes[row.0].data.len();
                    let mut dr = vec![0.0; n];
                    for (idx, gv) in g.iter().enumerate() {
                        dr[idx % n] += gv;
                    }
                    self.add_to_grad(*row, &dr);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(gv, bv)| gv * bv).collect();
                    self.add_to_grad(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[a.0].data).map(|(gv, av)| gv * av).collect();
                    self.add_to_grad(*b, &db);
                }
            }
            Op::Div { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[b.0].data).map(|(gv, bv)| gv / bv).collect();
                    self.add_to_grad(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    self.add_to_grad(*b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                self.add_to_grad(*x, &dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.nodes[s.0].data[0];
                if self.needs(*x) {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * sv).collect();
                    self.add_to_grad(*x, &dx);
                }
                if self.needs(*s) {
                    let ds: f64 = g.iter().zip(&self.nodes[x.0].data).map(|(gv, xv)| gv * xv).sum();
                    self.add_to_grad(*s, &[ds]);
                }
            }
            Op::Abs { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| gv * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.add_to_grad(*x, &dx);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_to_grad(*x, &dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(gv, &xv)| gv * gelu_bwd(xv))
                    .collect();
                self.add_to_grad(*x, &dx);
            }
            Op::Sigmoid { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect();
                self.add_to_grad(*x, &dx);
            }
            Op::Tanh { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(gv, &y)| gv * (1.0 - y * y))
                    .collect();
                self.add_to_grad(*x, &dx);
            }
            Op::Min { a, b } | Op::Max { a, b } => {
                let take_a = |av: f64, bv: f64| match op {
                    Op::Min { .. } => av < bv,
                    _ => av > bv,
                };
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                if self.needs(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(gv, (&x, &y))| {
                            if x == y { gv * 0.5 } else if take_a(x, y) { *gv } else { 0.0 }
                        })
                        .collect();
                    self.add_to_grad(*a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(gv, (&x, &y))| {
                            if x == y { gv * 0.5 } else if take_a(x, y) { 0.0 } else { *gv }
                        })
                        .collect();
                    self.add_to_grad(*b, &db);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let y = self.nodes[i].data.clone();
                    let shape = self.nodes[i].shape.clone();
                    let mut dx = vec![0.0; y.len()];
                    for_each_lane(&shape, *axis, |idx| {
                        let dot: f64 = idx.iter().map(|&k| g[k] * y[k]).sum();
                        for &k in idx {
                            dx[k] = y[k] * (g[k] - dot);
                        }
                    });
                    self.add_to_grad(*x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let shape = self.nodes[i].shape.clone();
                let n = *shape.last().unwrap();
                let rows = numel(&shape) / n;
                let xv = self.nodes[x.0].data.clone();
                let gv = self.nodes[gain.0].data.clone();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..rows {
                    let row = &xv[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    for j in 0..n {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let dxhat: Vec<f64> = (0..n).map(|j| grow[j] * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.add_to_grad(*x, &dx);
                self.add_to_grad(*gain, &dgain);
                self.add_to_grad(*bias, &dbias);
            }
            Op::ConcatRows { parts } => {
                let cols = self.nodes[i].shape[1];
                let mut row0 = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    let chunk = g[row0 * cols..(row0 + r) * cols].to_vec();
                    self.add_to_grad(p, &chunk);
                    row0 += r;
                }
            }
            Op::ConcatCols { parts } => {
                let total_cols = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut col0 = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut chunk = vec![0.0; rows * c];
                        for r in 0..rows {
                            chunk[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total_cols + col0..r * total_cols + col0 + c]);
                        }
                        self.add_to_grad(p, &chunk);
                    }
                    col0 += c;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let cols = self.nodes[i].shape[1];
                    let len = self.nodes[i].shape[0];
                    let full = self.nodes[x.0].data.len();
                    let mut dx = vec![0.0; full];
                    dx[start * cols..(start + len) * cols].copy_from_slice(&g);
                    self.add_to_grad(*x, &dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (rows, len) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let cols = self.shape(*x)[1];
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    self.add_to_grad(*x, &dx);
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[c * rows + r] = g[r * cols + c];
                        }
                    }
                    self.add_to_grad(*x, &dx);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let dx = vec![g[0]; self.nodes[x.0].data.len()];
                    self.add_to_grad(*x, &dx);
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let n = self.nodes[x.0].data.len();
                    let dx = vec![g[0] / n as f64; n];
                    self.add_to_grad(*x, &dx);
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let dim = self.nodes[i].shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            dt[id * dim + j] += g[pos * dim + j];
                        }
                    }
                    self.add_to_grad(*table, &dt);
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                if self.needs(*logits) {
                    let (rows, cols) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let lv = self.nodes[logits.0].data.clone();
                    let active = mask.iter().filter(|&&m| m).count() as f64;
                    let scale = g[0] / active;
                    let mut dl = vec![0.0; rows * cols];
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = &lv[r * cols..(r + 1) * cols];
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..cols {
                            let p = exps[c] / sum;
                            dl[r * cols + c] = scale * (p - if c == targets[r] { 1.0 } else { 0.0 });
                        }
                    }
                    self.add_to_grad(*logits, &dl);
                }
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Invoke `f` with the flat indices of every lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = vec![0usize; len];
    for o in 0..outer {
        for i in 0..inner {
            for (k, slot) in idx.iter_mut().enumerate() {
                *slot = o * len * inner + k * inner + i;
            }
            f(&idx);
        }
    }
}
