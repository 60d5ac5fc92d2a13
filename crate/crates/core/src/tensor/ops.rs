//! Forward evaluation for every op kind.

use std::sync::Arc;

use super::{axis_split, numel, Graph, NodeId, Op, Result, TensorError};

/// How the right operand of an elementwise op lines up with the left.
/// Broadcasting is deliberately restricted to scalar-with-tensor and a
/// per-row vector over the last axis of a 2-D tensor.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    RowVector,
}

pub(crate) fn classify_broadcast(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if numel(rhs) == 1 {
        return Ok(Broadcast::Scalar);
    }
    if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        return Ok(Broadcast::RowVector);
    }
    Err(TensorError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() })
}

/// C[n,m] = A[n,k] @ B[k,m], row accumulation over k so the inner loop
/// streams rows of B.
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// C[n,m] = A[n,k] @ B[m,k]^T.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * m..(i + 1) * m];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] = s;
        }
    }
    c
}

/// C[k,m] = A[n,k]^T @ B[n,m].
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = arow[p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for j in 0..m {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn elementwise(
    lhs: &[f32],
    rhs: &[f32],
    mode: Broadcast,
    cols: usize,
    f: impl Fn(f32, f32) -> f32,
) -> Vec<f32> {
    match mode {
        Broadcast::Same => lhs.iter().zip(rhs).map(|(&a, &b)| f(a, b)).collect(),
        Broadcast::Scalar => {
            let b = rhs[0];
            lhs.iter().map(|&a| f(a, b)).collect()
        }
        Broadcast::RowVector => lhs
            .iter()
            .enumerate()
            .map(|(i, &a)| f(a, rhs[i % cols]))
            .collect(),
    }
}

impl Graph {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = self.binary_pre("matmul", a, b)?;
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let (n, k, m) = (na.shape[0], na.shape[1], nb.shape[1]);
        let values = matmul_nn(&na.values, &nb.values, n, k, m);
        self.emit(vec![n, m], values, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = self.binary_pre("add", a, b)?;
        let mode = classify_broadcast("add", &na.shape, &nb.shape)?;
        let cols = *na.shape.last().unwrap_or(&1);
        let values = elementwise(&na.values, &nb.values, mode, cols, |x, y| x + y);
        let shape = na.shape.clone();
        self.emit(shape, values, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = self.binary_pre("sub", a, b)?;
        let mode = classify_broadcast("sub", &na.shape, &nb.shape)?;
        let cols = *na.shape.last().unwrap_or(&1);
        let values = elementwise(&na.values, &nb.values, mode, cols, |x, y| x - y);
        let shape = na.shape.clone();
        self.emit(shape, values, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, nb) = self.binary_pre("mul", a, b)?;
        let mode = classify_broadcast("mul", &na.shape, &nb.shape)?;
        let cols = *na.shape.last().unwrap_or(&1);
        let values = elementwise(&na.values, &nb.values, mode, cols, |x, y| x * y);
        let shape = na.shape.clone();
        self.emit(shape, values, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let na = self.unary_pre("add_scalar", a)?;
        let values = na.values.iter().map(|&x| x + c).collect();
        let shape = na.shape.clone();
        self.emit(shape, values, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let na = self.unary_pre("mul_scalar", a)?;
        let values = na.values.iter().map(|&x| x * c).collect();
        let shape = na.shape.clone();
        self.emit(shape, values, Op::MulScalar(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.unary_pre("tanh", a)?;
        let values = na.values.iter().map(|&x| x.tanh()).collect();
        let shape = na.shape.clone();
        self.emit(shape, values, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.unary_pre("sigmoid", a)?;
        let values = na.values.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = na.shape.clone();
        self.emit(shape, values, Op::Sigmoid(a))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                reason: "needs at least one input".into(),
            });
        }
        for &p in parts {
            self.unary_pre("concat", p)?;
        }
        let first = self.nodes()[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "concat",
                index: axis,
                extent: first.len(),
            });
        }
        let mut total_axis = 0usize;
        for &p in parts {
            let s = &self.nodes()[p.0].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut values = vec![0.0f32; numel(&shape)];
        for o in 0..outer {
            let mut offset = 0usize;
            for &p in parts {
                let node = &self.nodes()[p.0];
                let ext = node.shape[axis];
                let src = &node.values[o * ext * inner..(o + 1) * ext * inner];
                let dst_start = (o * total_axis + offset) * inner;
                values[dst_start..dst_start + ext * inner].copy_from_slice(src);
                offset += ext;
            }
        }
        self.emit(shape, values, Op::Concat { axis, parts: parts.to_vec() })
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let na = self.unary_pre("softmax", a)?;
        if axis >= na.shape.len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "softmax",
                index: axis,
                extent: na.shape.len(),
            });
        }
        let shape = na.shape.clone();
        let values = softmax_lanes(&na.values, &shape, axis, None)?;
        self.emit(shape, values, Op::Softmax { input: a, axis })
    }

    /// Softmax restricted to positions where `allow` is true; disallowed
    /// positions get weight exactly zero. `allow` is elementwise over the
    /// whole tensor.
    pub fn masked_softmax(&mut self, a: NodeId, axis: usize, allow: &[bool]) -> Result<NodeId> {
        let na = self.unary_pre("masked_softmax", a)?;
        if axis >= na.shape.len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "masked_softmax",
                index: axis,
                extent: na.shape.len(),
            });
        }
        if allow.len() != na.values.len() {
            return Err(TensorError::LengthMismatch {
                shape: na.shape.clone(),
                got: allow.len(),
                expected: na.values.len(),
            });
        }
        let shape = na.shape.clone();
        let values = softmax_lanes(&na.values, &shape, axis, Some(allow))?;
        let allow: Arc<[bool]> = allow.to_vec().into();
        self.emit(shape, values, Op::MaskedSoftmax { input: a, axis, allow })
    }

    pub fn log_softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let na = self.unary_pre("log_softmax", a)?;
        if axis >= na.shape.len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "log_softmax",
                index: axis,
                extent: na.shape.len(),
            });
        }
        let shape = na.shape.clone();
        let (outer, extent, inner) = axis_split(&shape, axis);
        let x = &na.values;
        let mut values = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * extent + j) * inner + i;
                let mut max = f32::NEG_INFINITY;
                for j in 0..extent {
                    max = max.max(x[at(j)]);
                }
                let mut denom = 0.0f64;
                for j in 0..extent {
                    denom += f64::from(x[at(j)] - max).exp();
                }
                let log_denom = denom.ln() as f32;
                for j in 0..extent {
                    values[at(j)] = x[at(j)] - max - log_denom;
                }
            }
        }
        self.emit(shape, values, Op::LogSoftmax { input: a, axis })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.unary_pre("sum", a)?;
        let total: f64 = na.values.iter().map(|&v| f64::from(v)).sum();
        self.emit(vec![1], vec![total as f32], Op::Sum { input: a, axis: None })
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (shape, values) = self.reduce_axis("sum", a, axis, false)?;
        self.emit(shape, values, Op::Sum { input: a, axis: Some(axis) })
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.unary_pre("mean", a)?;
        let n = na.values.len() as f64;
        let total: f64 = na.values.iter().map(|&v| f64::from(v)).sum();
        self.emit(vec![1], vec![(total / n) as f32], Op::Mean { input: a, axis: None })
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (shape, values) = self.reduce_axis("mean", a, axis, true)?;
        self.emit(shape, values, Op::Mean { input: a, axis: Some(axis) })
    }

    /// Population variance along `axis`.
    pub fn variance_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let na = self.unary_pre("variance", a)?;
        if axis >= na.shape.len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "variance",
                index: axis,
                extent: na.shape.len(),
            });
        }
        let in_shape = na.shape.clone();
        let (outer, extent, inner) = axis_split(&in_shape, axis);
        let x = &na.values;
        let mut values = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * extent + j) * inner + i;
                let mut mean = 0.0f64;
                for j in 0..extent {
                    mean += f64::from(x[at(j)]);
                }
                mean /= extent as f64;
                let mut var = 0.0f64;
                for j in 0..extent {
                    let d = f64::from(x[at(j)]) - mean;
                    var += d * d;
                }
                values[o * inner + i] = (var / extent as f64) as f32;
            }
        }
        let shape = reduced_shape(&in_shape, axis);
        self.emit(shape, values, Op::Variance { input: a, axis })
    }

    /// Per-row standardization of a 2-D tensor: `(x - mean) / (std + eps)`
    /// with population statistics over the last axis. The epsilon is added
    /// to the standard deviation, not the variance.
    pub fn normalize_rows(&mut self, a: NodeId, eps: f32) -> Result<NodeId> {
        let na = self.unary_pre("normalize_rows", a)?;
        if na.shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "normalize_rows",
                shape: na.shape.clone(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidStep(eps));
        }
        let (rows, cols) = (na.shape[0], na.shape[1]);
        let x = &na.values;
        let mut values = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let denom = (var.sqrt() + f64::from(eps)) as f32;
            for c in 0..cols {
                values[r * cols + c] = (row[c] - mean as f32) / denom;
            }
        }
        let shape = na.shape.clone();
        self.emit(shape, values, Op::NormalizeRows { input: a, eps })
    }

    /// Scale row `i` of a 2-D tensor by `scale[i]`.
    pub fn row_scale(&mut self, a: NodeId, scale: NodeId) -> Result<NodeId> {
        let (na, ns) = self.binary_pre("row_scale", a, scale)?;
        if na.shape.len() != 2 || numel(&ns.shape) != na.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                lhs: na.shape.clone(),
                rhs: ns.shape.clone(),
            });
        }
        let (rows, cols) = (na.shape[0], na.shape[1]);
        let mut values = vec![0.0f32; na.values.len()];
        for r in 0..rows {
            let s = ns.values[r];
            for c in 0..cols {
                values[r * cols + c] = na.values[r * cols + c] * s;
            }
        }
        let shape = na.shape.clone();
        self.emit(shape, values, Op::RowScale { input: a, scale })
    }

    /// Row lookup into a 2-D table: output row r is `table[indices[r]]`.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let nt = self.unary_pre("gather", table)?;
        if nt.shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: nt.shape.clone(),
                reason: "table must be 2-D".into(),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather",
                shape: vec![0],
                reason: "needs at least one index".into(),
            });
        }
        let (rows, cols) = (nt.shape[0], nt.shape[1]);
        let mut values = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::IndexOutOfBounds { op: "gather", index: ix, extent: rows });
            }
            values.extend_from_slice(&nt.values[ix * cols..(ix + 1) * cols]);
        }
        let indices: Arc<[usize]> = indices.to_vec().into();
        self.emit(vec![indices.len(), cols], values, Op::Gather { table, indices })
    }

    /// Select one element per row of a 2-D tensor: output[i] = x[i, indices[i]].
    pub fn pick_per_row(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let na = self.unary_pre("pick_per_row", a)?;
        if na.shape.len() != 2 || indices.len() != na.shape[0] {
            return Err(TensorError::InvalidShape {
                op: "pick_per_row",
                shape: na.shape.clone(),
                reason: format!("expected 2-D with {} rows of indices", indices.len()),
            });
        }
        let cols = na.shape[1];
        let mut values = Vec::with_capacity(indices.len());
        for (r, &ix) in indices.iter().enumerate() {
            if ix >= cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "pick_per_row",
                    index: ix,
                    extent: cols,
                });
            }
            values.push(na.values[r * cols + ix]);
        }
        let n = indices.len();
        let indices: Arc<[usize]> = indices.to_vec().into();
        self.emit(vec![n], values, Op::PickPerRow { input: a, indices })
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let na = self.unary_pre("slice", a)?;
        if axis >= na.shape.len() {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                index: axis,
                extent: na.shape.len(),
            });
        }
        let extent = na.shape[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let in_shape = na.shape.clone();
        let (outer, _, inner) = axis_split(&in_shape, axis);
        let mut shape = in_shape;
        shape[axis] = len;
        let mut values = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let begin = (o * extent + start) * inner;
            values.extend_from_slice(&na.values[begin..begin + len * inner]);
        }
        self.emit(shape, values, Op::Slice { input: a, axis, start, len })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let na = self.unary_pre("reshape", a)?;
        if numel(&shape) != na.values.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                got: na.values.len(),
                expected: 0,
            });
        }
        let values = na.values.clone();
        self.emit(shape, values, Op::Reshape { input: a })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let na = self.unary_pre("transpose", a)?;
        if na.shape.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: na.shape.clone(),
                reason: "expected a 2-D tensor".into(),
            });
        }
        let (rows, cols) = (na.shape[0], na.shape[1]);
        let mut values = vec![0.0f32; na.values.len()];
        for r in 0..rows {
            for c in 0..cols {
                values[c * rows + r] = na.values[r * cols + c];
            }
        }
        self.emit(vec![cols, rows], values, Op::Transpose(a))
    }

    fn reduce_axis(
        &self,
        op: &'static str,
        a: NodeId,
        axis: usize,
        mean: bool,
    ) -> Result<(Vec<usize>, Vec<f32>)> {
        let na = self.unary_pre(op, a)?;
        if axis >= na.shape.len() {
            return Err(TensorError::IndexOutOfBounds {
                op,
                index: axis,
                extent: na.shape.len(),
            });
        }
        let (outer, extent, inner) = axis_split(&na.shape, axis);
        let x = &na.values;
        let mut values = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for j in 0..extent {
                    acc += f64::from(x[(o * extent + j) * inner + i]);
                }
                if mean {
                    acc /= extent as f64;
                }
                values[o * inner + i] = acc as f32;
            }
        }
        Ok((reduced_shape(&na.shape, axis), values))
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Stable softmax over one axis; `allow` (when given) removes positions
/// from both the max and the normalizer, and forces their output to zero.
fn softmax_lanes(
    x: &[f32],
    shape: &[usize],
    axis: usize,
    allow: Option<&[bool]>,
) -> Result<Vec<f32>> {
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * extent + j) * inner + i;
            let lane_ok = |j: usize| allow.map_or(true, |m| m[at(j)]);
            let mut max = f32::NEG_INFINITY;
            for j in 0..extent {
                if lane_ok(j) {
                    max = max.max(x[at(j)]);
                }
            }
            if max == f32::NEG_INFINITY {
                return Err(TensorError::AllMasked { lane: o * inner + i });
            }
            let mut denom = 0.0f64;
            for j in 0..extent {
                if lane_ok(j) {
                    denom += f64::from(x[at(j)] - max).exp();
                }
            }
            for j in 0..extent {
                if lane_ok(j) {
                    out[at(j)] = (f64::from(x[at(j)] - max).exp() / denom) as f32;
                }
            }
        }
    }
    Ok(out)
}
