//! Central-difference gradient checking.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Result, TensorError};

/// Compare analytic gradients against central finite differences for a
/// scalar loss built by `build` from the given `(shape, values)` inputs.
///
/// Returns the maximum over all input entries of
/// `|analytic - difference| / max(1, |difference|)`.
pub fn grad_check<F>(build: F, inputs: &[(Vec<usize>, Vec<f32>)], step: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(TensorError::InvalidStep(step));
    }

    let run = |data: &[(Vec<usize>, Vec<f32>)], grad: bool| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = data
            .iter()
            .map(|(shape, values)| g.leaf(values.clone(), shape.clone(), grad))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &ids)?;
        if g.node(loss)?.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: g.shape(loss).to_vec() });
        }
        Ok((g, ids, loss))
    };

    let (graph, ids, loss) = run(inputs, true)?;
    let grads = graph.backward(loss)?;

    let mut worst = 0.0f32;
    let mut perturbed: Vec<(Vec<usize>, Vec<f32>)> = inputs.to_vec();
    for (k, (_, values)) in inputs.iter().enumerate() {
        let analytic = grads.get(ids[k]);
        for i in 0..values.len() {
            let original = values[i];
            perturbed[k].1[i] = original + step;
            let (gp, _, lp) = run(&perturbed, false)?;
            let plus = f64::from(gp.values(lp)[0]);
            perturbed[k].1[i] = original - step;
            let (gm, _, lm) = run(&perturbed, false)?;
            let minus = f64::from(gm.values(lm)[0]);
            perturbed[k].1[i] = original;

            let fd = ((plus - minus) / (2.0 * f64::from(step))) as f32;
            let a = analytic.map_or(0.0, |g| g[i]);
            let err = (a - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Result of one op's gradient-check battery.
#[derive(Clone, Debug)]
pub struct OpGradReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f32,
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    // Box-Muller keeps this independent of rand_distr.
    (0..n)
        .map(|_| {
            let u1: f32 = rng.random::<f32>().max(1e-7);
            let u2: f32 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
        })
        .collect()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

/// Gradient-check every differentiable op over `trials` random instances
/// each. The scalar loss is a random weighting of the op output so the
/// full Jacobian is probed.
pub fn op_grad_battery(trials: usize, seed: u64) -> Result<Vec<OpGradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // Weighted-sum scalarizer: loss = sum(out * w).
    fn weighted_loss(g: &mut Graph, out: NodeId, weights: &[f32]) -> Result<NodeId> {
        let shape = g.shape(out).to_vec();
        let w = g.constant(weights.to_vec(), shape)?;
        let prod = g.mul(out, w)?;
        g.sum_all(prod)
    }

    macro_rules! battery {
        ($name:expr, $make:expr) => {{
            let mut worst = 0.0f32;
            for _ in 0..trials {
                let err = $make(&mut rng)?;
                worst = worst.max(err);
            }
            reports.push(OpGradReport { op: $name, trials, max_rel_err: worst });
        }};
    }

    battery!("matmul", |rng: &mut ChaCha8Rng| {
        let (n, k, m) = (dim(rng), dim(rng), dim(rng));
        let inputs = vec![
            (vec![n, k], randn(rng, n * k)),
            (vec![k, m], randn(rng, k * m)),
        ];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    for (name, which) in [("add", 0u8), ("sub", 1u8), ("mul", 2u8)] {
        battery!(name, |rng: &mut ChaCha8Rng| {
            let (n, m) = (dim(rng), dim(rng));
            // Rotate through the three supported layouts.
            let layout = rng.random_range(0..3u8);
            let rhs_shape = match layout {
                0 => vec![n, m],
                1 => vec![1],
                _ => vec![m],
            };
            let rhs_len = super::numel(&rhs_shape);
            let inputs = vec![
                (vec![n, m], randn(rng, n * m)),
                (rhs_shape, randn(rng, rhs_len)),
            ];
            let w = randn(rng, n * m);
            grad_check(
                |g, ids| {
                    let y = match which {
                        0 => g.add(ids[0], ids[1])?,
                        1 => g.sub(ids[0], ids[1])?,
                        _ => g.mul(ids[0], ids[1])?,
                    };
                    weighted_loss(g, y, &w)
                },
                &inputs,
                1e-3,
            )
        });
    }

    battery!("add_scalar", |rng: &mut ChaCha8Rng| {
        let n = dim(rng) * dim(rng);
        let c: f32 = randn(rng, 1)[0];
        let inputs = vec![(vec![n], randn(rng, n))];
        let w = randn(rng, n);
        grad_check(
            |g, ids| {
                let y = g.add_scalar(ids[0], c)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("mul_scalar", |rng: &mut ChaCha8Rng| {
        let n = dim(rng) * dim(rng);
        let c: f32 = randn(rng, 1)[0];
        let inputs = vec![(vec![n], randn(rng, n))];
        let w = randn(rng, n);
        grad_check(
            |g, ids| {
                let y = g.mul_scalar(ids[0], c)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    for (name, which) in [("tanh", true), ("sigmoid", false)] {
        battery!(name, |rng: &mut ChaCha8Rng| {
            let n = dim(rng) * dim(rng);
            let inputs = vec![(vec![n], randn(rng, n))];
            let w = randn(rng, n);
            grad_check(
                |g, ids| {
                    let y = if which { g.tanh(ids[0])? } else { g.sigmoid(ids[0])? };
                    weighted_loss(g, y, &w)
                },
                &inputs,
                1e-3,
            )
        });
    }

    battery!("concat", |rng: &mut ChaCha8Rng| {
        let (n1, n2, m) = (dim(rng), dim(rng), dim(rng));
        let axis = rng.random_range(0..2usize);
        let (s1, s2) = if axis == 0 {
            (vec![n1, m], vec![n2, m])
        } else {
            (vec![m, n1], vec![m, n2])
        };
        let (l1, l2) = (super::numel(&s1), super::numel(&s2));
        let total = l1 + l2;
        let inputs = vec![(s1, randn(rng, l1)), (s2, randn(rng, l2))];
        let w = randn(rng, total);
        grad_check(
            |g, ids| {
                let y = g.concat(axis, &[ids[0], ids[1]])?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("softmax", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng).max(2));
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.softmax(ids[0], 1)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("masked_softmax", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng).max(2));
        let mut allow = vec![false; n * m];
        for r in 0..n {
            // Keep at least one open slot per lane.
            let forced = rng.random_range(0..m);
            for c in 0..m {
                allow[r * m + c] = c == forced || rng.random::<f32>() < 0.6;
            }
        }
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.masked_softmax(ids[0], 1, &allow)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("log_softmax", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng).max(2));
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.log_softmax(ids[0], 1)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("sum", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng));
        let whole = rng.random::<bool>();
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, if whole { 1 } else { m });
        grad_check(
            |g, ids| {
                let y = if whole { g.sum_all(ids[0])? } else { g.sum_axis(ids[0], 0)? };
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("mean", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng));
        let whole = rng.random::<bool>();
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, if whole { 1 } else { m });
        grad_check(
            |g, ids| {
                let y = if whole { g.mean_all(ids[0])? } else { g.mean_axis(ids[0], 0)? };
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("variance", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng).max(2));
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n);
        grad_check(
            |g, ids| {
                let y = g.variance_axis(ids[0], 1)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("normalize_rows", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng).max(3));
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.normalize_rows(ids[0], 1e-5)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("row_scale", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng));
        let inputs = vec![(vec![n, m], randn(rng, n * m)), (vec![n], randn(rng, n))];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.row_scale(ids[0], ids[1])?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("gather", |rng: &mut ChaCha8Rng| {
        let (rows, cols, n) = (dim(rng).max(2), dim(rng), dim(rng) + 1);
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
        let inputs = vec![(vec![rows, cols], randn(rng, rows * cols))];
        let w = randn(rng, n * cols);
        grad_check(
            |g, ids| {
                let y = g.gather(ids[0], &indices)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("pick_per_row", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng));
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n);
        grad_check(
            |g, ids| {
                let y = g.pick_per_row(ids[0], &indices)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("slice", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng).max(2), dim(rng));
        let start = rng.random_range(0..n - 1);
        let len = rng.random_range(1..=n - start);
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, len * m);
        grad_check(
            |g, ids| {
                let y = g.slice(ids[0], 0, start, len)?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("reshape", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng));
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.reshape(ids[0], vec![n * m])?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    battery!("transpose", |rng: &mut ChaCha8Rng| {
        let (n, m) = (dim(rng), dim(rng));
        let inputs = vec![(vec![n, m], randn(rng, n * m))];
        let w = randn(rng, n * m);
        grad_check(
            |g, ids| {
                let y = g.transpose(ids[0])?;
                weighted_loss(g, y, &w)
            },
            &inputs,
            1e-3,
        )
    });

    Ok(reports)
}
