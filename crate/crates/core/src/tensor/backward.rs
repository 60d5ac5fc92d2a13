//! Reverse-mode gradient accumulation over the tape.

use super::ops::{classify_broadcast, matmul_nt, matmul_tn, Broadcast};
use super::{axis_split, Graph, NodeId, Op, Result, TensorError};

/// Gradients keyed by node id, produced by one [`Graph::backward`] pass.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.by_node.get(id.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    /// Accumulate d(loss)/d(node) for every gradient-requiring ancestor of
    /// `loss`. The graph is not mutated, so repeated calls over the same
    /// tape produce identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let nodes = self.nodes();
        if loss.0 >= nodes.len() {
            return Err(TensorError::UnknownNode { op: "backward", id: loss });
        }
        if nodes[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: nodes[loss.0].shape.clone() });
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(
        &self,
        i: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let nodes = self.nodes();
        let node = &nodes[i];
        let mut add_to = |id: NodeId, contrib: &[f32]| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let slot =
                grads[id.0].get_or_insert_with(|| vec![0.0f32; nodes[id.0].numel()]);
            for (dst, &src) in slot.iter_mut().zip(contrib) {
                *dst += src;
            }
        };

        match &node.op {
            Op::Leaf => {}

            Op::MatMul(a, b) => {
                let sa = &nodes[a.0].shape;
                let sb = &nodes[b.0].shape;
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                // dA = G @ B^T, dB = A^T @ G
                let da = matmul_nt(g, &nodes[b.0].values, n, m, k);
                let db = matmul_tn(&nodes[a.0].values, g, n, k, m);
                add_to(*a, &da);
                add_to(*b, &db);
            }

            Op::Add(a, b) => {
                add_to(*a, g);
                let reduced = reduce_to_operand("add", nodes, *a, *b, g, |_, gv| gv)?;
                add_to(*b, &reduced);
            }

            Op::Sub(a, b) => {
                add_to(*a, g);
                let reduced = reduce_to_operand("sub", nodes, *a, *b, g, |_, gv| -gv)?;
                add_to(*b, &reduced);
            }

            Op::Mul(a, b) => {
                let na = &nodes[a.0];
                let nb = &nodes[b.0];
                let mode = classify_broadcast("mul", &na.shape, &nb.shape)?;
                let cols = *na.shape.last().unwrap_or(&1);
                // da = g * b (b expanded to a's shape)
                let da: Vec<f32> = match mode {
                    Broadcast::Same => g.iter().zip(&nb.values).map(|(&gv, &bv)| gv * bv).collect(),
                    Broadcast::Scalar => g.iter().map(|&gv| gv * nb.values[0]).collect(),
                    Broadcast::RowVector => g
                        .iter()
                        .enumerate()
                        .map(|(ix, &gv)| gv * nb.values[ix % cols])
                        .collect(),
                };
                add_to(*a, &da);
                let reduced =
                    reduce_to_operand("mul", nodes, *a, *b, g, |ix, gv| gv * na.values[ix])?;
                add_to(*b, &reduced);
            }

            Op::AddScalar(a, _) => add_to(*a, g),

            Op::MulScalar(a, c) => {
                let da: Vec<f32> = g.iter().map(|&gv| gv * c).collect();
                add_to(*a, &da);
            }

            Op::Tanh(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&node.values)
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                add_to(*a, &da);
            }

            Op::Sigmoid(a) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(&node.values)
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                add_to(*a, &da);
            }

            Op::Concat { axis, parts } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0usize;
                for &p in parts {
                    let ext = nodes[p.0].shape[*axis];
                    let mut dp = vec![0.0f32; nodes[p.0].numel()];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * ext * inner;
                        dp[dst..dst + ext * inner].copy_from_slice(&g[src..src + ext * inner]);
                    }
                    add_to(p, &dp);
                    offset += ext;
                }
            }

            Op::Softmax { input, axis } | Op::MaskedSoftmax { input, axis, .. } => {
                // dx_j = y_j * (g_j - sum_k g_k y_k); masked positions have
                // y = 0 and therefore zero gradient.
                let y = &node.values;
                let (outer, extent, inner) = axis_split(&node.shape, *axis);
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |j: usize| (o * extent + j) * inner + i2;
                        let mut dot = 0.0f64;
                        for j in 0..extent {
                            dot += f64::from(g[at(j)]) * f64::from(y[at(j)]);
                        }
                        for j in 0..extent {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot as f32);
                        }
                    }
                }
                add_to(*input, &dx);
            }

            Op::LogSoftmax { input, axis } => {
                // dx_j = g_j - softmax_j * sum_k g_k
                let y = &node.values;
                let (outer, extent, inner) = axis_split(&node.shape, *axis);
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |j: usize| (o * extent + j) * inner + i2;
                        let mut gsum = 0.0f64;
                        for j in 0..extent {
                            gsum += f64::from(g[at(j)]);
                        }
                        for j in 0..extent {
                            dx[at(j)] = g[at(j)] - f64::from(y[at(j)]).exp() as f32 * gsum as f32;
                        }
                    }
                }
                add_to(*input, &dx);
            }

            Op::Sum { input, axis } => {
                let src = &nodes[input.0];
                let dx = match axis {
                    None => vec![g[0]; src.numel()],
                    Some(ax) => spread_axis(&src.shape, *ax, g, 1.0),
                };
                add_to(*input, &dx);
            }

            Op::Mean { input, axis } => {
                let src = &nodes[input.0];
                let dx = match axis {
                    None => vec![g[0] / src.numel() as f32; src.numel()],
                    Some(ax) => spread_axis(&src.shape, *ax, g, 1.0 / src.shape[*ax] as f32),
                };
                add_to(*input, &dx);
            }

            Op::Variance { input, axis } => {
                // d var / d x_j = 2 (x_j - mean) / extent
                let src = &nodes[input.0];
                let (outer, extent, inner) = axis_split(&src.shape, *axis);
                let x = &src.values;
                let mut dx = vec![0.0f32; x.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let at = |j: usize| (o * extent + j) * inner + i2;
                        let mut mean = 0.0f64;
                        for j in 0..extent {
                            mean += f64::from(x[at(j)]);
                        }
                        mean /= extent as f64;
                        let gv = g[o * inner + i2];
                        for j in 0..extent {
                            dx[at(j)] =
                                gv * (2.0 * (f64::from(x[at(j)]) - mean) / extent as f64) as f32;
                        }
                    }
                }
                add_to(*input, &dx);
            }

            Op::NormalizeRows { input, eps } => {
                // y = (x - mu) / q with q = s + eps, s = sqrt(pop var):
                // dx_j = (g_j - mean(g)) / q - y_j * sum(g*y) / (cols * s)
                let src = &nodes[input.0];
                let (rows, cols) = (src.shape[0], src.shape[1]);
                let x = &src.values;
                let y = &node.values;
                let mut dx = vec![0.0f32; x.len()];
                for r in 0..rows {
                    let row = &x[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
                    let var = row
                        .iter()
                        .map(|&v| {
                            let d = f64::from(v) - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / cols as f64;
                    let s = var.sqrt();
                    let q = s + f64::from(*eps);
                    let gmean = grow.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
                    let gy: f64 = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&gv, &yv)| f64::from(gv) * f64::from(yv))
                        .sum();
                    // A constant row has s == 0; the curvature term is then
                    // vacuous (y is identically zero), so drop it.
                    let curvature = if s > 0.0 { gy / (cols as f64 * s) } else { 0.0 };
                    for c in 0..cols {
                        dx[r * cols + c] = ((f64::from(grow[c]) - gmean) / q
                            - f64::from(yrow[c]) * curvature)
                            as f32;
                    }
                }
                add_to(*input, &dx);
            }

            Op::RowScale { input, scale } => {
                let src = &nodes[input.0];
                let (rows, cols) = (src.shape[0], src.shape[1]);
                let s = &nodes[scale.0].values;
                let mut dx = vec![0.0f32; src.numel()];
                let mut ds = vec![0.0f32; rows];
                for r in 0..rows {
                    let mut acc = 0.0f64;
                    for c in 0..cols {
                        let ix = r * cols + c;
                        dx[ix] = g[ix] * s[r];
                        acc += f64::from(g[ix]) * f64::from(src.values[ix]);
                    }
                    ds[r] = acc as f32;
                }
                add_to(*input, &dx);
                add_to(*scale, &ds);
            }

            Op::Gather { table, indices } => {
                let cols = nodes[table.0].shape[1];
                let mut dt = vec![0.0f32; nodes[table.0].numel()];
                for (r, &ix) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dt[ix * cols + c] += g[r * cols + c];
                    }
                }
                add_to(*table, &dt);
            }

            Op::PickPerRow { input, indices } => {
                let cols = nodes[input.0].shape[1];
                let mut dx = vec![0.0f32; nodes[input.0].numel()];
                for (r, &ix) in indices.iter().enumerate() {
                    dx[r * cols + ix] += g[r];
                }
                add_to(*input, &dx);
            }

            Op::Slice { input, axis, start, len } => {
                let src = &nodes[input.0];
                let (outer, extent, inner) = axis_split(&src.shape, *axis);
                let mut dx = vec![0.0f32; src.numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let srcix = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[srcix..srcix + len * inner]);
                }
                add_to(*input, &dx);
            }

            Op::Reshape { input } => add_to(*input, g),

            Op::Transpose(a) => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let mut dx = vec![0.0f32; g.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[c * rows + r] = g[r * cols + c];
                    }
                }
                add_to(*a, &dx);
            }
        }
        Ok(())
    }
}

/// Reduce an output-shaped gradient onto the (possibly broadcast) right
/// operand of an elementwise op. `f` maps (flat index, grad) to the
/// contribution before reduction.
fn reduce_to_operand(
    op: &'static str,
    nodes: &[super::TensorNode],
    a: NodeId,
    b: NodeId,
    g: &[f32],
    f: impl Fn(usize, f32) -> f32,
) -> Result<Vec<f32>> {
    let na = &nodes[a.0];
    let nb = &nodes[b.0];
    let mode = classify_broadcast(op, &na.shape, &nb.shape)?;
    Ok(match mode {
        Broadcast::Same => g.iter().enumerate().map(|(ix, &gv)| f(ix, gv)).collect(),
        Broadcast::Scalar => {
            let total: f64 = g
                .iter()
                .enumerate()
                .map(|(ix, &gv)| f64::from(f(ix, gv)))
                .sum();
            vec![total as f32]
        }
        Broadcast::RowVector => {
            let cols = na.shape[1];
            let mut out = vec![0.0f64; cols];
            for (ix, &gv) in g.iter().enumerate() {
                out[ix % cols] += f64::from(f(ix, gv));
            }
            out.into_iter().map(|v| v as f32).collect()
        }
    })
}

/// Broadcast a reduced-axis gradient back over that axis, scaled.
fn spread_axis(shape: &[usize], axis: usize, g: &[f32], scale: f32) -> Vec<f32> {
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut dx = vec![0.0f32; outer * extent * inner];
    for o in 0..outer {
        for j in 0..extent {
            for i in 0..inner {
                dx[(o * extent + j) * inner + i] = g[o * inner + i] * scale;
            }
        }
    }
    dx
}
