use super::*;
use crate::tensor::grad_check;
use crate::text::{encode, Role, Vocab, SPECIAL_TOKENS};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

fn tiny_cfg() -> GruConfig {
    GruConfig {
        vocab_size: 12,
        embed_dim: 5,
        hidden_dim: 6,
        layers: 2,
        attn_dim: 4,
        grid_attn: false,
    }
}

fn toy_vocab() -> Vocab {
    let words: Vec<String> = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain((0..7).map(|i| format!("w{i}")))
        .collect();
    Vocab::from_words(words).unwrap()
}

fn cell_leaves(
    g: &mut Graph,
    din: usize,
    h: usize,
    fill: impl Fn(usize) -> Vec<f32>,
) -> CellIds {
    let mut mk = |rows: usize, cols: usize| {
        let vals = fill(rows * cols);
        g.leaf(vals, vec![rows, cols], false).unwrap()
    };
    let wz = mk(din, h);
    let uz = mk(h, h);
    let wr = mk(din, h);
    let ur = mk(h, h);
    let wh = mk(din, h);
    let uh = mk(h, h);
    let mut mkb = |cols: usize| {
        let vals = fill(cols);
        g.leaf(vals, vec![cols], false).unwrap()
    };
    let bz = mkb(h);
    let br = mkb(h);
    let bh = mkb(h);
    CellIds { wz, uz, bz, wr, ur, br, wh, uh, bh }
}

#[test]
fn cell_all_zero_weights_halves_state() {
    // z = r = 0.5 and cand = 0, so h' = 0.5 h.
    let mut g = Graph::new();
    let ids = cell_leaves(&mut g, 3, 4, |n| vec![0.0; n]);
    let x = g.constant(vec![1.0, -2.0, 0.5], vec![1, 3]).unwrap();
    let h = g.constant(vec![4.0, -2.0, 8.0, 0.0], vec![1, 4]).unwrap();
    let out = gru_cell(&mut g, x, h, &ids).unwrap();
    assert_eq!(g.values(out), &[2.0, -1.0, 4.0, 0.0]);
}

#[test]
fn cell_zero_everything_is_zero() {
    let mut g = Graph::new();
    let ids = cell_leaves(&mut g, 3, 4, |n| vec![0.0; n]);
    let x = g.constant(vec![0.0; 3], vec![1, 3]).unwrap();
    let h = g.constant(vec![0.0; 4], vec![1, 4]).unwrap();
    let out = gru_cell(&mut g, x, h, &ids).unwrap();
    assert_eq!(g.values(out), &[0.0; 4]);
}

#[test]
fn cell_matches_scalar_loop() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (din, h) = (3usize, 4usize);
    let mut next = || rng.random_range(-1.0..1.0f32);
    let mut g = Graph::new();
    let mut mats: Vec<Vec<f32>> = Vec::new();
    let ids = {
        let mut take = |rows: usize, cols: usize, g: &mut Graph, is_bias: bool| {
            let vals: Vec<f32> = (0..rows * cols).map(|_| next()).collect();
            mats.push(vals.clone());
            if is_bias {
                g.leaf(vals, vec![cols], false).unwrap()
            } else {
                g.leaf(vals, vec![rows, cols], false).unwrap()
            }
        };
        let wz = take(din, h, &mut g, false);
        let uz = take(h, h, &mut g, false);
        let bz = take(1, h, &mut g, true);
        let wr = take(din, h, &mut g, false);
        let ur = take(h, h, &mut g, false);
        let br = take(1, h, &mut g, true);
        let wh = take(din, h, &mut g, false);
        let uh = take(h, h, &mut g, false);
        let bh = take(1, h, &mut g, true);
        CellIds { wz, uz, bz, wr, ur, br, wh, uh, bh }
    };
    let x_data: Vec<f32> = (0..din).map(|_| next()).collect();
    let h_data: Vec<f32> = (0..h).map(|_| next()).collect();
    let x = g.constant(x_data.clone(), vec![1, din]).unwrap();
    let hn = g.constant(h_data.clone(), vec![1, h]).unwrap();
    let out = gru_cell(&mut g, x, hn, &ids).unwrap();

    // Independent scalar-loop evaluation of the same equations.
    let affine = |w: &[f32], u: &[f32], b: &[f32]| -> Vec<f32> {
        (0..h)
            .map(|j| {
                let mut s = b[j];
                for i in 0..din {
                    s += x_data[i] * w[i * h + j];
                }
                for i in 0..h {
                    s += h_data[i] * u[i * h + j];
                }
                s
            })
            .collect()
    };
    let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
    let z: Vec<f32> = affine(&mats[0], &mats[1], &mats[2]).iter().map(|&v| sig(v)).collect();
    let r: Vec<f32> = affine(&mats[3], &mats[4], &mats[5]).iter().map(|&v| sig(v)).collect();
    let cand: Vec<f32> = (0..h)
        .map(|j| {
            let mut s = mats[8][j];
            for i in 0..din {
                s += x_data[i] * mats[6][i * h + j];
            }
            for i in 0..h {
                s += r[i] * h_data[i] * mats[7][i * h + j];
            }
            s.tanh()
        })
        .collect();
    let want: Vec<f32> = (0..h).map(|j| (1.0 - z[j]) * h_data[j] + z[j] * cand[j]).collect();
    for (got, want) in g.values(out).iter().zip(&want) {
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn attention_uniform_over_identical_states() {
    let mut g = Graph::new();
    let h = 3usize;
    let k = 2usize;
    let s = 4usize;
    let w = g.constant((0..2 * h * k).map(|i| 0.1 * i as f32).collect(), vec![2 * h, k]).unwrap();
    let v = g.constant(vec![0.7, -0.3], vec![k]).unwrap();
    let h_t = g.constant(vec![0.5, -0.1, 0.2], vec![1, h]).unwrap();
    let row = [0.4f32, 0.2, -0.6];
    let h_s = g.constant(row.repeat(s), vec![s, h]).unwrap();
    let out = luong_attention(&mut g, h_t, h_s, &[true; 4], w, v).unwrap();
    for &a in g.values(out.alpha) {
        assert!((a - 0.25).abs() < 1e-6);
    }
    for (c, r) in g.values(out.context).iter().zip(&row) {
        assert!((c - r).abs() < 1e-6);
    }
}

#[test]
fn attention_zero_v_is_uniform() {
    let mut g = Graph::new();
    let (h, k, s) = (3usize, 2usize, 5usize);
    let w = g.constant((0..2 * h * k).map(|i| 0.05 * i as f32 - 0.2).collect(), vec![2 * h, k]).unwrap();
    let v = g.constant(vec![0.0; k], vec![k]).unwrap();
    let h_t = g.constant(vec![0.5, -0.1, 0.2], vec![1, h]).unwrap();
    let h_s = g.constant((0..s * h).map(|i| (i as f32 * 0.17).sin()).collect(), vec![s, h]).unwrap();
    let out = luong_attention(&mut g, h_t, h_s, &[true; 5], w, v).unwrap();
    for &a in g.values(out.alpha) {
        assert!((a - 0.2).abs() < 1e-6);
    }
}

#[test]
fn attention_matches_hand_rolled_two_positions() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut next = || rng.random_range(-1.0..1.0f32);
    let (h, k) = (3usize, 2usize);
    let w_data: Vec<f32> = (0..2 * h * k).map(|_| next()).collect();
    let v_data: Vec<f32> = (0..k).map(|_| next()).collect();
    let ht_data: Vec<f32> = (0..h).map(|_| next()).collect();
    let hs_data: Vec<f32> = (0..2 * h).map(|_| next()).collect();

    let mut g = Graph::new();
    let w = g.constant(w_data.clone(), vec![2 * h, k]).unwrap();
    let v = g.constant(v_data.clone(), vec![k]).unwrap();
    let h_t = g.constant(ht_data.clone(), vec![1, h]).unwrap();
    let h_s = g.constant(hs_data.clone(), vec![2, h]).unwrap();
    let out = luong_attention(&mut g, h_t, h_s, &[true, true], w, v).unwrap();

    // Hand-rolled score/softmax/weighted-sum.
    let score = |hs: &[f32]| -> f32 {
        let mut acc = 0.0f32;
        for j in 0..k {
            let mut pre = 0.0f32;
            for i in 0..h {
                pre += ht_data[i] * w_data[i * k + j];
            }
            for i in 0..h {
                pre += hs[i] * w_data[(h + i) * k + j];
            }
            acc += v_data[j] * pre.tanh();
        }
        acc
    };
    let s0 = score(&hs_data[0..h]);
    let s1 = score(&hs_data[h..]);
    let m = s0.max(s1);
    let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
    let a0 = e0 / (e0 + e1);
    let a1 = e1 / (e0 + e1);
    let alpha = g.values(out.alpha);
    assert!((alpha[0] - a0).abs() < 1e-5 && (alpha[1] - a1).abs() < 1e-5);
    let ctx = g.values(out.context);
    for i in 0..h {
        let want = a0 * hs_data[i] + a1 * hs_data[h + i];
        assert!((ctx[i] - want).abs() < 1e-5);
    }
}

#[test]
fn attention_rejects_fully_masked() {
    let mut g = Graph::new();
    let (h, k) = (2usize, 2usize);
    let w = g.constant(vec![0.1; 2 * h * k], vec![2 * h, k]).unwrap();
    let v = g.constant(vec![0.5; k], vec![k]).unwrap();
    let h_t = g.constant(vec![0.0; h], vec![1, h]).unwrap();
    let h_s = g.constant(vec![0.0; 2 * h], vec![2, h]).unwrap();
    let err = luong_attention(&mut g, h_t, h_s, &[false, false], w, v).unwrap_err();
    assert!(matches!(err, TensorError::AllMasked { .. }));
}

#[test]
fn untrained_generation_terminates() {
    let cfg = tiny_cfg();
    let model = GruModel::new(cfg);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let params = model.init_params(&mut rng);
    let vocab = toy_vocab();
    let input = encode("w0 w1 w2", Role::Input, &vocab);
    let out = model.generate(&params, &input, None, DecodeMode::Greedy).unwrap();
    assert_eq!(out.ids.len(), OUTPUT_LEN);
    assert!(out.true_length <= OUTPUT_LEN);
}

#[test]
fn beam_width_one_equals_greedy() {
    let model = GruModel::new(tiny_cfg());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let params = model.init_params(&mut rng);
    let vocab = toy_vocab();
    for text in ["w0 w1", "w3 w4 w5 w6", "w2"] {
        let input = encode(text, Role::Input, &vocab);
        let greedy = model.generate(&params, &input, None, DecodeMode::Greedy).unwrap();
        let beam = model.generate(&params, &input, None, DecodeMode::Beam(1)).unwrap();
        assert_eq!(greedy.ids, beam.ids);
    }
}

#[test]
fn vis_variant_requires_features() {
    let mut cfg = tiny_cfg();
    cfg.grid_attn = true;
    let model = GruModel::new(cfg);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let params = model.init_params(&mut rng);
    let vocab = toy_vocab();
    let input = encode("w0", Role::Input, &vocab);
    let err = model.generate(&params, &input, None, DecodeMode::Greedy).unwrap_err();
    assert!(matches!(err, GruError::MissingFeatures));
}

#[test]
fn pad_only_positions_do_not_affect_output() {
    // Positions at or past true_length are all PAD; any permutation of
    // them leaves the (bitwise) output unchanged because generation only
    // reads the true-length prefix.
    let model = GruModel::new(tiny_cfg());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let params = model.init_params(&mut rng);
    let vocab = toy_vocab();
    let a = encode("w0 w1 w2", Role::Input, &vocab);
    let mut b = a.clone();
    let tail = b.ids.split_off(b.true_length);
    b.ids.extend(tail.into_iter().rev());
    let out_a = model.generate(&params, &a, None, DecodeMode::Greedy).unwrap();
    let out_b = model.generate(&params, &b, None, DecodeMode::Greedy).unwrap();
    assert_eq!(out_a.ids, out_b.ids);
}

#[test]
fn full_decoder_step_gradient_check() {
    // Loss built from one complete decoder step: embedding, attention,
    // both cells, and the output projection, against central differences.
    let (v, e, h, k, s) = (6usize, 3usize, 4usize, 3usize, 2usize);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut next = || rng.random_range(-0.8..0.8f32);
    let mut inputs: Vec<(Vec<usize>, Vec<f32>)> = Vec::new();
    let mut push = |shape: Vec<usize>, next: &mut dyn FnMut() -> f32| {
        let n: usize = shape.iter().product();
        let vals = (0..n).map(|_| next()).collect();
        inputs.push((shape, vals));
    };
    push(vec![v, e], &mut next); // 0 embedding
    push(vec![2 * h, k], &mut next); // 1 attn.w
    push(vec![k], &mut next); // 2 attn.v
    push(vec![s, h], &mut next); // 3 encoder states
    // cell 0 (input e + h wide), cell 1 (input h wide)
    for din in [e + h, h] {
        push(vec![din, h], &mut next);
        push(vec![h, h], &mut next);
        push(vec![h], &mut next);
        push(vec![din, h], &mut next);
        push(vec![h, h], &mut next);
        push(vec![h], &mut next);
        push(vec![din, h], &mut next);
        push(vec![h, h], &mut next);
        push(vec![h], &mut next);
    }
    push(vec![h, v], &mut next); // 22 out.w
    push(vec![v], &mut next); // 23 out.b
    push(vec![2, h], &mut next); // 24 initial decoder states (one per layer)

    let err = grad_check(
        |g, ids| {
            let cell = |base: usize| CellIds {
                wz: ids[base],
                uz: ids[base + 1],
                bz: ids[base + 2],
                wr: ids[base + 3],
                ur: ids[base + 4],
                br: ids[base + 5],
                wh: ids[base + 6],
                uh: ids[base + 7],
                bh: ids[base + 8],
            };
            let prev = g.gather(ids[0], &[2])?; // prev token embedding [1, e]
            let init = ids[24];
            let h0 = g.slice(init, 0, 0, 1)?;
            let h1 = g.slice(init, 0, 1, 1)?;
            let att = luong_attention(g, h1, ids[3], &[true; 2], ids[1], ids[2])?;
            let x0 = g.concat(1, &[prev, att.context])?;
            let s0 = gru_cell(g, x0, h0, &cell(4))?;
            let s1 = gru_cell(g, s0, h1, &cell(13))?;
            let logits = g.matmul(s1, ids[22])?;
            let logits = g.add(logits, ids[23])?;
            let logp = g.log_softmax(logits, 1)?;
            let picked = g.pick_per_row(logp, &[3])?;
            let total = g.sum_all(picked)?;
            g.mul_scalar(total, -1.0)
        },
        &inputs,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "decoder step relative error {err}");
}
