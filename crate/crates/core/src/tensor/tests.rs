use super::*;
use proptest::prelude::*;

fn assert_close(got: &[f32], want: &[f32], tol: f32) {
    assert_eq!(got.len(), want.len(), "length mismatch: {got:?} vs {want:?}");
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= tol, "{got:?} !~ {want:?}");
    }
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
    let eye = g.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
    let y = g.matmul(a, eye).unwrap();
    assert_eq!(g.values(y), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(g.shape(y), &[2, 2]);
}

#[test]
fn softmax_symmetry() {
    let mut g = Graph::new();
    let x = g.constant(vec![0.0, 0.0], vec![2]).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_close(g.values(y), &[0.5, 0.5], 1e-7);
}

#[test]
fn concat_axis0() {
    let mut g = Graph::new();
    let a = g.constant(vec![1.0, 2.0], vec![2]).unwrap();
    let b = g.constant(vec![3.0], vec![1]).unwrap();
    let y = g.concat(0, &[a, b]).unwrap();
    assert_eq!(g.values(y), &[1.0, 2.0, 3.0]);
    assert_eq!(g.shape(y), &[3]);
}

#[test]
fn backward_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(vec![5.0, -1.0, 2.0], vec![3], true).unwrap();
    let loss = g.sum_all(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::new();
    let x = g.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn grad_check_tanh_matmul() {
    // loss = sum(tanh(W x)) against the central-difference oracle.
    let inputs = vec![
        (vec![3, 2], vec![0.3, -0.7, 0.1, 0.9, -0.4, 0.2]),
        (vec![2, 1], vec![0.5, -1.2]),
    ];
    let err = grad_check(
        |g, ids| {
            let wx = g.matmul(ids[0], ids[1])?;
            let t = g.tanh(wx)?;
            g.sum_all(t)
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn grad_check_sum_exact() {
    // Around zero the perturbed losses are exactly representable, so the
    // difference quotient matches the analytic gradient bit for bit.
    let inputs = vec![(vec![4], vec![0.0; 4])];
    let err = grad_check(|g, ids| g.sum_all(ids[0]), &inputs, 1e-3).unwrap();
    assert_eq!(err, 0.0);

    // Generic inputs only see float roundoff, far below tolerance.
    let inputs = vec![(vec![4], vec![1.0, -2.0, 0.5, 3.0])];
    let err = grad_check(|g, ids| g.sum_all(ids[0]), &inputs, 1e-3).unwrap();
    assert!(err < 5e-4, "relative error {err}");
}

#[test]
fn grad_check_softmax_sum_is_constant() {
    // sum(softmax(x)) == 1, so the gradient is ~0 everywhere.
    let inputs = vec![(vec![3], vec![0.2, -0.4, 1.1])];
    let err = grad_check(
        |g, ids| {
            let s = g.softmax(ids[0], 0)?;
            g.sum_all(s)
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn grad_check_rejects_non_scalar() {
    let inputs = vec![(vec![2], vec![1.0, 2.0])];
    let err = grad_check(|g, ids| g.tanh(ids[0]), &inputs, 1e-3);
    assert!(matches!(err, Err(TensorError::NonScalarLoss { .. })));
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(vec![0.0; 6], vec![2, 3]).unwrap();
    let b = g.constant(vec![0.0; 4], vec![4]).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn backward_rejects_foreign_node() {
    let mut g = Graph::new();
    let x = g.leaf(vec![1.0], vec![1], true).unwrap();
    let _ = x;
    let err = g.backward(NodeId(42)).unwrap_err();
    assert!(matches!(err, TensorError::UnknownNode { .. }));
}

#[test]
fn non_finite_is_flagged() {
    let mut g = Graph::new();
    let a = g.constant(vec![f32::MAX], vec![1]).unwrap();
    let b = g.constant(vec![f32::MAX], vec![1]).unwrap();
    let err = g.mul(a, b).unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { op: "mul", .. }));
}

#[test]
fn masked_softmax_zeroes_disallowed() {
    let mut g = Graph::new();
    let x = g.constant(vec![5.0, 1.0, 2.0, 3.0], vec![2, 2]).unwrap();
    let y = g
        .masked_softmax(x, 1, &[true, false, true, true])
        .unwrap();
    let v = g.values(y);
    assert_eq!(v[0], 1.0);
    assert_eq!(v[1], 0.0);
    assert!((v[2] + v[3] - 1.0).abs() < 1e-6);
}

#[test]
fn masked_softmax_rejects_empty_lane() {
    let mut g = Graph::new();
    let x = g.constant(vec![1.0, 2.0], vec![1, 2]).unwrap();
    let err = g.masked_softmax(x, 1, &[false, false]).unwrap_err();
    assert!(matches!(err, TensorError::AllMasked { lane: 0 }));
}

#[test]
fn forward_is_bit_deterministic() {
    let build = || {
        let mut g = Graph::new();
        let a = g.constant(vec![0.3, -0.2, 0.7, 0.05, 1.3, -0.8], vec![2, 3]).unwrap();
        let b = g.constant(vec![0.11, -0.4, 0.9, 0.33, -0.21, 0.6], vec![3, 2]).unwrap();
        let m = g.matmul(a, b).unwrap();
        let t = g.tanh(m).unwrap();
        let s = g.softmax(t, 1).unwrap();
        let out = g.values(s).to_vec();
        out
    };
    let first = build();
    let second = build();
    assert_eq!(
        first.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        second.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn backward_twice_identical() {
    let mut g = Graph::new();
    let x = g.leaf(vec![0.4, -1.1, 0.9], vec![3], true).unwrap();
    let t = g.tanh(x).unwrap();
    let loss = g.sum_all(t).unwrap();
    let g1 = g.backward(loss).unwrap();
    let g2 = g.backward(loss).unwrap();
    assert_eq!(
        g1.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        g2.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn battery_smoke() {
    for report in op_grad_battery(3, 11).unwrap() {
        assert!(
            report.max_rel_err < 1e-3,
            "{} exceeded tolerance: {}",
            report.op,
            report.max_rel_err
        );
    }
}

#[test]
fn normalize_rows_fixture() {
    // x = [1,2,3]: mean 2, population std sqrt(2/3).
    let mut g = Graph::new();
    let x = g.constant(vec![1.0, 2.0, 3.0], vec![1, 3]).unwrap();
    let y = g.normalize_rows(x, 1e-7).unwrap();
    assert_close(g.values(y), &[-1.224_744_9, 0.0, 1.224_744_9], 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..4, cols in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0f32)).collect();
        let mut g = Graph::new();
        let x = g.constant(values, vec![rows, cols]).unwrap();
        let s = g.softmax(x, 1).unwrap();
        let v = g.values(s);
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f32 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
        }
    }

    #[test]
    fn concat_roundtrips_through_slice(n1 in 1usize..4, n2 in 1usize..4, m in 1usize..4) {
        let mut g = Graph::new();
        let a_vals: Vec<f32> = (0..n1 * m).map(|i| i as f32).collect();
        let b_vals: Vec<f32> = (0..n2 * m).map(|i| 100.0 + i as f32).collect();
        let a = g.constant(a_vals.clone(), vec![n1, m]).unwrap();
        let b = g.constant(b_vals.clone(), vec![n2, m]).unwrap();
        let c = g.concat(0, &[a, b]).unwrap();
        let back_a = g.slice(c, 0, 0, n1).unwrap();
        let back_b = g.slice(c, 0, n1, n2).unwrap();
        prop_assert_eq!(g.values(back_a), &a_vals[..]);
        prop_assert_eq!(g.values(back_b), &b_vals[..]);
    }
}
