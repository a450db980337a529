//! Reverse-mode autodiff over flat f64 tensors.
//!
//! A `Graph` is a tape: every operation appends a node holding its output
//! and enough bookkeeping to push gradients back to its inputs. Graphs are
//! cheap and rebuilt per training step; parameters live outside the tape
//! and are inserted as leaves.
//!
//! All arithmetic is 64-bit. Every op validates that its output is finite;
//! a NaN/Inf anywhere is reported as an error instead of propagating.

use crate::error::{Error, Result};

/// Handle to a node on a specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Tape node: output value plus the op that produced it.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    op: Op,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddBias { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Gelu { a: usize },
    SoftmaxLast { a: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize> },
    SumAll { a: usize },
    MeanAll { a: usize },
    MeanAxis { a: usize, axis: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize, end: usize },
    GatherRows { a: usize, indices: Vec<usize> },
    SpaceToDepth { a: usize, h: usize, w: usize, c: usize, block: usize },
}

/// Row-major 2-D matmul, `a[m,k] @ b[k,n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    backward_done: bool,
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

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                let last = *s.last().unwrap();
                (s.iter().product::<usize>() / last, last)
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, name: &'static str) -> Result<TensorId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.op_requires_grad(&op);
        let grad = if requires_grad && matches!(op, Op::Leaf) {
            Some(vec![0.0; data.len()])
        } else {
            None
        };
        self.nodes.push(Tensor { shape, data, grad, requires_grad, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let any = |ids: &[usize]| ids.iter().any(|&i| self.nodes[i].requires_grad);
        match op {
            Op::Leaf => false, // overridden by leaf()
            Op::MatMul { a, b } | Op::Add { a, b } | Op::AddBias { a, b } | Op::Mul { a, b } => {
                any(&[*a, *b])
            }
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::SoftmaxLast { a }
            | Op::SumAll { a }
            | Op::MeanAll { a }
            | Op::MeanAxis { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::SpaceToDepth { a, .. } => any(&[*a]),
            Op::LayerNorm { x, gamma, beta, .. } => any(&[*x, *gamma, *beta]),
            Op::Embedding { table, .. } => any(&[*table]),
            Op::CrossEntropy { logits, .. } => any(&[*logits]),
            Op::ConcatRows { parts } | Op::ConcatCols { parts } => any(parts),
        }
    }

    /// Inserts a leaf tensor. Leaves with `requires_grad` get a zeroed grad
    /// buffer immediately, so unused parameters read back as all-zero grads.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        self.nodes.push(Tensor { shape, data, grad, requires_grad, op: Op::Leaf });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![1], vec![v])
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        if self.nodes[a.0].shape.len() != 2 || self.nodes[b.0].shape.len() != 2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.push(vec![m, n], data, Op::MatMul { a: a.0, b: b.0 }, "matmul")
    }

    /// Elementwise add; also accepts a rank-1 bias broadcast over rows.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa == sb {
            let data: Vec<f64> = self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(x, y)| x + y)
                .collect();
            return self.push(sa, data, Op::Add { a: a.0, b: b.0 }, "add");
        }
        let (rows, cols) = self.rows_cols(a);
        if sb.len() == 1 && sb[0] == cols {
            let bias = &self.nodes[b.0].data;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    data.push(self.nodes[a.0].data[r * cols + c] + bias[c]);
                }
            }
            return self.push(sa, data, Op::AddBias { a: a.0, b: b.0 }, "add");
        }
        Err(Error::ShapeMismatch { op: "add", lhs: sa, rhs: sb })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "mul", lhs: sa, rhs: sb });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(sa, data, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Scale { a: a.0, factor }, "scale")
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::Gelu { a: a.0 }, "gelu")
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(a);
        if cols == 0 {
            return Err(Error::InvalidInput("softmax over empty axis".into()));
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, Op::SoftmaxLast { a: a.0 }, "softmax")
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`. A zero-variance row normalizes to zeros.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(x);
        if self.nodes[gamma.0].data.len() != cols || self.nodes[beta.0].data.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(
            shape,
            data,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps },
            "layer_norm",
        )
    }

    /// Row lookup: `table[V, D]` indexed by `ids` gives `[len(ids), D]`.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, dim) = self.rows_cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidInput(format!(
                "embedding id {bad} out of vocab {vocab}"
            )));
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        self.push(
            vec![ids.len(), dim],
            data,
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            "embedding",
        )
    }

    /// Per-row cross entropy `-log softmax(logits)[target]`; output `[rows]`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(logits);
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.nodes[logits.0].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if cols == 0 {
            return Err(Error::InvalidInput("cross_entropy over empty axis".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::InvalidInput(format!("target {bad} out of range {cols}")));
        }
        let src = &self.nodes[logits.0].data;
        let mut data = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            data.push(lse - row[t]);
        }
        self.push(
            vec![rows],
            data,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec() },
            "cross_entropy",
        )
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s], Op::SumAll { a: a.0 }, "sum_all")
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.is_empty() {
            return Err(Error::InvalidInput("mean over empty tensor".into()));
        }
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![1], vec![s / n], Op::MeanAll { a: a.0 }, "mean_all")
    }

    /// Mean over one axis of an arbitrary-rank tensor.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::InvalidInput(format!(
                "mean axis {axis} out of rank {}",
                shape.len()
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * mid + m) * inner + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= mid as f64;
        }
        self.push(out_shape, data, Op::MeanAxis { a: a.0, axis }, "mean_axis")
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: shape, rhs: vec![] });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        self.push(vec![cols, rows], data, Op::Transpose { a: a.0 }, "transpose")
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.nodes[a.0].data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        self.push(shape, data, Op::Reshape { a: a.0 }, "reshape")
    }

    /// Stack 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_rows of zero tensors".into()));
        }
        let (_, cols) = self.rows_cols(parts[0]);
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let op = Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() };
        self.push(vec![rows, cols], data, op, "concat_rows")
    }

    /// Join 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of zero tensors".into()));
        }
        let (rows, _) = self.rows_cols(parts[0]);
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.rows_cols(p);
                data.extend_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
            }
        }
        let op = Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() };
        self.push(vec![rows, cols], data, op, "concat_cols")
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(a);
        if start > end || end > rows {
            return Err(Error::InvalidInput(format!(
                "slice_rows {start}..{end} out of {rows} rows"
            )));
        }
        let data = self.nodes[a.0].data[start * cols..end * cols].to_vec();
        self.push(vec![end - start, cols], data, Op::SliceRows { a: a.0, start }, "slice_rows")
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(a);
        if start > end || end > cols {
            return Err(Error::InvalidInput(format!(
                "slice_cols {start}..{end} out of {cols} cols"
            )));
        }
        let width = end - start;
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        self.push(vec![rows, width], data, Op::SliceCols { a: a.0, start, end }, "slice_cols")
    }

    /// Select rows by index; repeats allowed.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.rows_cols(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidInput(format!("gather index {bad} out of {rows} rows")));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        self.push(
            vec![indices.len(), cols],
            data,
            Op::GatherRows { a: a.0, indices: indices.to_vec() },
            "gather_rows",
        )
    }

    /// Rearranges a `[h*w, c]` pixel grid into non-overlapping `block x block`
    /// patches: output is `[(h/b)*(w/b), b*b*c]`, patches row-major, pixels
    /// within a patch row-major. Pure permutation, so the gradient is exact.
    pub fn space_to_depth(&mut self, a: TensorId, h: usize, w: usize, block: usize) -> Result<TensorId> {
        let (rows, c) = self.rows_cols(a);
        if rows != h * w || h % block != 0 || w % block != 0 || block == 0 {
            return Err(Error::InvalidInput(format!(
                "space_to_depth: grid {h}x{w} with block {block} does not match {rows} rows"
            )));
        }
        let (gh, gw) = (h / block, w / block);
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; h * w * c];
        for bi in 0..gh {
            for bj in 0..gw {
                let patch = (bi * gw + bj) * block * block * c;
                for di in 0..block {
                    for dj in 0..block {
                        let src_px = ((bi * block + di) * w + bj * block + dj) * c;
                        let dst = patch + (di * block + dj) * c;
                        data[dst..dst + c].copy_from_slice(&src[src_px..src_px + c]);
                    }
                }
            }
        }
        self.push(
            vec![gh * gw, block * block * c],
            data,
            Op::SpaceToDepth { a: a.0, h, w, c, block },
            "space_to_depth",
        )
    }

    /// `x @ w + bias`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, bias: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, bias)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Fills gradient buffers of every `requires_grad` tensor reachable
    /// from `loss`. Gradients accumulate additively; running backward a
    /// second time without `zero_grads` is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // nothing trainable feeds the loss
        }

        // Seed the sweep with a temporary per-node buffer so reverse
        // accumulation does not disturb pre-existing leaf grads until the
        // final add.
        let n = self.nodes.len();
        let mut flow: Vec<Option<Vec<f64>>> = vec![None; n];
        flow[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(grad) = flow[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let buf = self.nodes[i].grad.as_mut().expect("leaf grad buffer");
                    for (g, d) in buf.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = shape2(&self.nodes[a].shape);
                    let n_cols = self.nodes[b].shape[1];
                    if self.nodes[a].requires_grad {
                        // dA = dC @ B^T
                        let bt = transpose_raw(&self.nodes[b].data, k, n_cols);
                        let da = matmul_raw(&grad, &bt, m, n_cols, k);
                        accumulate(&mut flow[a], &da);
                    }
                    if self.nodes[b].requires_grad {
                        // dB = A^T @ dC
                        let at = transpose_raw(&self.nodes[a].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, n_cols);
                        accumulate(&mut flow[b], &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut flow[a], &grad);
                    }
                    if self.nodes[b].requires_grad {
                        accumulate(&mut flow[b], &grad);
                    }
                }
                Op::AddBias { a, b } => {
                    if self.nodes[a].requires_grad {
                        accumulate(&mut flow[a], &grad);
                    }
                    if self.nodes[b].requires_grad {
                        let cols = self.nodes[b].data.len();
                        let rows = grad.len() / cols;
                        let mut db = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += grad[r * cols + c];
                            }
                        }
                        accumulate(&mut flow[b], &db);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].requires_grad {
                        let da: Vec<f64> =
                            grad.iter().zip(&self.nodes[b].data).map(|(g, v)| g * v).collect();
                        accumulate(&mut flow[a], &da);
                    }
                    if self.nodes[b].requires_grad {
                        let db: Vec<f64> =
                            grad.iter().zip(&self.nodes[a].data).map(|(g, v)| g * v).collect();
                        accumulate(&mut flow[b], &db);
                    }
                }
                Op::Scale { a, factor } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                    accumulate(&mut flow[a], &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(g, &x)| g * gelu_deriv(x))
                        .collect();
                    accumulate(&mut flow[a], &da);
                }
                Op::SoftmaxLast { a } => {
                    let out = &self.nodes[i].data;
                    let cols = *self.nodes[i].shape.last().unwrap();
                    let rows = out.len() / cols;
                    let mut da = vec![0.0; out.len()];
                    for r in 0..rows {
                        let o = &out[r * cols..(r + 1) * cols];
                        let g = &grad[r * cols..(r + 1) * cols];
                        let dot: f64 = o.iter().zip(g).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            da[r * cols + c] = o[c] * (g[c] - dot);
                        }
                    }
                    accumulate(&mut flow[a], &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let cols = self.nodes[gamma].data.len();
                    let rows = self.nodes[x].data.len() / cols;
                    let xs = self.nodes[x].data.clone();
                    let gs = self.nodes[gamma].data.clone();
                    let mut dx = vec![0.0; xs.len()];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let row = &xs[r * cols..(r + 1) * cols];
                        let g = &grad[r * cols..(r + 1) * cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = (0..cols).map(|c| g[c] * gs[c]).collect();
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let nf = cols as f64;
                        for c in 0..cols {
                            dgamma[c] += g[c] * xhat[c];
                            dbeta[c] += g[c];
                            dx[r * cols + c] = inv_std / nf
                                * (nf * dxhat[c] - sum_dxhat - xhat[c] * sum_dxhat_xhat);
                        }
                    }
                    if self.nodes[x].requires_grad {
                        accumulate(&mut flow[x], &dx);
                    }
                    if self.nodes[gamma].requires_grad {
                        accumulate(&mut flow[gamma], &dgamma);
                    }
                    if self.nodes[beta].requires_grad {
                        accumulate(&mut flow[beta], &dbeta);
                    }
                }
                Op::Embedding { table, ids } => {
                    let dim = self.nodes[table].shape[1];
                    let mut dt = vec![0.0; self.nodes[table].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            dt[id * dim + c] += grad[r * dim + c];
                        }
                    }
                    accumulate(&mut flow[table], &dt);
                }
                Op::CrossEntropy { logits, targets } => {
                    let cols = *self.nodes[logits].shape.last().unwrap();
                    let src = &self.nodes[logits].data;
                    let mut dl = vec![0.0; src.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &src[r * cols..(r + 1) * cols];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..cols {
                            let p = exps[c] / sum;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dl[r * cols + c] = grad[r] * (p - onehot);
                        }
                    }
                    accumulate(&mut flow[logits], &dl);
                }
                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.nodes[a].data.len()];
                    accumulate(&mut flow[a], &da);
                }
                Op::MeanAll { a } => {
                    let len = self.nodes[a].data.len();
                    let da = vec![grad[0] / len as f64; len];
                    accumulate(&mut flow[a], &da);
                }
                Op::MeanAxis { a, axis } => {
                    let shape = self.nodes[a].shape.clone();
                    let outer: usize = shape[..axis].iter().product();
                    let mid = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    for o in 0..outer {
                        for m in 0..mid {
                            for inr in 0..inner {
                                da[(o * mid + m) * inner + inr] =
                                    grad[o * inner + inr] / mid as f64;
                            }
                        }
                    }
                    accumulate(&mut flow[a], &da);
                }
                Op::Transpose { a } => {
                    let (out_r, out_c) = shape2(&self.nodes[i].shape);
                    let da = transpose_raw(&grad, out_r, out_c);
                    accumulate(&mut flow[a], &da);
                }
                Op::Reshape { a } => {
                    accumulate(&mut flow[a], &grad);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in &parts {
                        let len = self.nodes[p].data.len();
                        if self.nodes[p].requires_grad {
                            accumulate(&mut flow[p], &grad[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let total_cols = *self.nodes[i].shape.last().unwrap();
                    let rows = self.nodes[i].data.len() / total_cols;
                    let mut col_off = 0;
                    for &p in &parts {
                        let c = *self.nodes[p].shape.last().unwrap();
                        if self.nodes[p].requires_grad {
                            let mut dp = vec![0.0; rows * c];
                            for r in 0..rows {
                                dp[r * c..(r + 1) * c].copy_from_slice(
                                    &grad[r * total_cols + col_off..r * total_cols + col_off + c],
                                );
                            }
                            accumulate(&mut flow[p], &dp);
                        }
                        col_off += c;
                    }
                }
                Op::SliceRows { a, start } => {
                    let cols = *self.nodes[a].shape.last().unwrap();
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    da[start * cols..start * cols + grad.len()].copy_from_slice(&grad);
                    accumulate(&mut flow[a], &da);
                }
                Op::SliceCols { a, start, end } => {
                    let cols = *self.nodes[a].shape.last().unwrap();
                    let width = end - start;
                    let rows = self.nodes[a].data.len() / cols;
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + end]
                            .copy_from_slice(&grad[r * width..(r + 1) * width]);
                    }
                    accumulate(&mut flow[a], &da);
                }
                Op::GatherRows { a, indices } => {
                    let cols = *self.nodes[a].shape.last().unwrap();
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da[idx * cols + c] += grad[r * cols + c];
                        }
                    }
                    accumulate(&mut flow[a], &da);
                }
                Op::SpaceToDepth { a, h, w, c, block } => {
                    let (gh, gw) = (h / block, w / block);
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    for bi in 0..gh {
                        for bj in 0..gw {
                            let patch = (bi * gw + bj) * block * block * c;
                            for di in 0..block {
                                for dj in 0..block {
                                    let src_px = ((bi * block + di) * w + bj * block + dj) * c;
                                    let dst = patch + (di * block + dj) * c;
                                    da[src_px..src_px + c]
                                        .copy_from_slice(&grad[dst..dst + c]);
                                }
                            }
                        }
                    }
                    accumulate(&mut flow[a], &da);
                }
            }
        }
        Ok(())
    }

    /// Zeroes every populated grad buffer and re-arms backward.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.backward_done = false;
    }
}

fn shape2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta) {
                *b += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}
