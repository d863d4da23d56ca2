mod common;

use common::checks;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use retromae::masking::{build_visibility, AttnVisibility, MaskedInput};
use retromae::model::{decode_basic, encode};
use retromae::optim::{adam_step, AdamState};
use retromae::tensor::MASKED;
use retromae::{Tape, Tensor, Var};

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (m, k, n) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(1..9));
        let a = random_mat(m, k, &mut rng);
        let b = random_mat(k, n, &mut rng);
        let want = flat(&matmul(&a, &b));
        let ta = Tensor::from_rows(&a).unwrap();
        let tb = Tensor::from_rows(&b).unwrap();
        assert!(max_abs_diff(ta.matmul(&tb).unwrap().data(), &want) < 1e-12);

        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(ta.clone()), tape.constant(tb.clone()));
        let c = tape.matmul(va, vb).unwrap();
        assert!(max_abs_diff(tape.value(c).data(), &want) < 1e-12);
        let vbt = tape.constant(tb.transpose());
        let c = tape.matmul_bt(va, vbt).unwrap();
        assert!(max_abs_diff(tape.value(c).data(), &want) < 1e-12);
    }
}

#[test]
fn cross_entropy_matches_direct_formula() {
    for seed in 0..3 {
        assert!(checks::cross_entropy_err(seed) < 1e-9);
    }
}

#[test]
fn adam_matches_hand_rolled_three_steps() {
    let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
    let grads = [vec![0.5, -1.0, 0.0], vec![0.25, 2.0, -3.0], vec![-0.75, 0.5, 1.0]];
    let mut p = vec![Tensor::vector(vec![1.0, 2.0, -1.0]).unwrap()];
    let mut state = AdamState::new(&[3], lr, b1, b2, eps).unwrap();
    let mut w = [1.0, 2.0, -1.0];
    let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
    for (t, g) in grads.iter().enumerate() {
        adam_step(&mut p, &["w"], std::slice::from_ref(g), &mut state, None).unwrap();
        let t = (t + 1) as i32;
        for j in 0..3 {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            w[j] -= lr * mh / (vh.sqrt() + eps);
        }
        assert!(max_abs_diff(p[0].data(), &w) < 1e-15);
    }
    assert_eq!(state.step_count, 3);
}

/// Central-difference check of one tape operation. `build` maps tracked
/// leaves to an output node; the scalar loss is `Σ output ⊙ weights` with
/// fixed random weights so every output element matters.
fn op_gradcheck(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let loss_of = |inputs: &[Tensor], track: bool| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(track);
                tape.leaf(t)
            })
            .collect();
        let out = build(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let n = tape.value(out).len();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let weights = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let wv = tape.constant(weights);
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };
    let (mut tape, vars, loss) = loss_of(&inputs, true);
    tape.backward(loss).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut up = inputs.clone();
            up[k].data_mut()[j] += h;
            let mut down = inputs.clone();
            down[k].data_mut()[j] -= h;
            let (tu, _, lu) = loss_of(&up, false);
            let (td, _, ld) = loss_of(&down, false);
            let numeric = (tu.value(lu).item() - td.value(ld).item()) / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand_t(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_rows(&random_mat(rows, cols, &mut rng)).unwrap()
}

#[test]
fn every_tape_op_matches_finite_differences() {
    let tol = 1e-6;
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", op_gradcheck(vec![rand_t(3, 4, 1), rand_t(4, 2, 2)], |t, v| t.matmul(v[0], v[1]).unwrap())),
        ("matmul_bt", op_gradcheck(vec![rand_t(3, 4, 1), rand_t(5, 4, 2)], |t, v| t.matmul_bt(v[0], v[1]).unwrap())),
        ("transpose", op_gradcheck(vec![rand_t(3, 4, 1)], |t, v| t.transpose(v[0]))),
        ("add", op_gradcheck(vec![rand_t(3, 4, 1), rand_t(3, 4, 2)], |t, v| t.add(v[0], v[1]).unwrap())),
        ("mul", op_gradcheck(vec![rand_t(3, 4, 1), rand_t(3, 4, 2)], |t, v| t.mul(v[0], v[1]).unwrap())),
        ("add_row", op_gradcheck(vec![rand_t(3, 4, 1), Tensor::vector(rand_t(1, 4, 2).into_data()).unwrap()], |t, v| {
            t.add_row(v[0], v[1]).unwrap()
        })),
        ("scale", op_gradcheck(vec![rand_t(3, 4, 1)], |t, v| t.scale(v[0], -2.5))),
        ("gather", op_gradcheck(vec![rand_t(6, 3, 1)], |t, v| t.gather(v[0], &[4, 1, 4, 0]).unwrap())),
        ("slice_rows", op_gradcheck(vec![rand_t(6, 3, 1)], |t, v| t.slice_rows(v[0], 2, 3).unwrap())),
        ("slice_cols", op_gradcheck(vec![rand_t(3, 6, 1)], |t, v| t.slice_cols(v[0], 1, 4).unwrap())),
        ("concat_rows", op_gradcheck(vec![rand_t(2, 3, 1), rand_t(1, 3, 2)], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
        ("concat_cols", op_gradcheck(vec![rand_t(2, 3, 1), rand_t(2, 1, 2)], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap())),
        ("softmax_masked", op_gradcheck(vec![rand_t(3, 4, 1)], |t, v| {
            let mut mask = Tensor::zeros(vec![3, 4]).unwrap();
            mask.data_mut()[1] = MASKED;
            mask.data_mut()[6] = MASKED;
            mask.data_mut()[11] = f64::NEG_INFINITY;
            t.softmax_masked(v[0], &mask).unwrap()
        })),
        ("layer_norm", op_gradcheck(
            vec![rand_t(3, 5, 1), Tensor::vector(rand_t(1, 5, 2).into_data()).unwrap(), Tensor::vector(rand_t(1, 5, 3).into_data()).unwrap()],
            |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
        )),
        ("gelu", op_gradcheck(vec![rand_t(3, 4, 1)], |t, v| t.gelu(v[0]))),
        ("cross_entropy", op_gradcheck(vec![rand_t(4, 5, 1)], |t, v| {
            t.cross_entropy(v[0], &[1, usize::MAX, 4, 0], usize::MAX).unwrap().loss
        })),
        ("l2_normalize_rows", op_gradcheck(vec![rand_t(3, 4, 1)], |t, v| t.l2_normalize_rows(v[0]).unwrap())),
        ("sum", op_gradcheck(vec![rand_t(3, 4, 1)], |t, v| t.sum(v[0]))),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: relative error {err:e}");
    }
}

#[test]
fn encoder_matches_reference_transformer() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..3 {
        let params = small_model(30, seed);
        for _ in 0..5 {
            let seq = checks::random_sequence(&mut rng, 30, 16);
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape, false);
            let out = encode(&mut tape, &pv, &MaskedInput::unmasked(&seq), true).unwrap();
            let states = encoder(&params, seq.ids());
            assert!(max_abs_diff(tape.value(out.token_states).data(), &flat(&states)) < 1e-9);
            let logits = tied_logits(&params, &states);
            assert!(max_abs_diff(tape.value(out.mlm_logits.unwrap()).data(), &flat(&logits)) < 1e-9);
        }
    }
}

#[test]
fn two_stream_decoder_matches_reference() {
    for seed in 0..3 {
        let err = checks::two_stream_forward(seed);
        assert!(err < 1e-9, "seed {seed}: {err:e}");
    }
}

#[test]
fn basic_decoder_is_full_attention_over_masked_context() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = small_model(30, 2);
    for _ in 0..5 {
        let seq = checks::random_sequence(&mut rng, 30, 16);
        let dec = retromae::masking::mask_for_decoder(&seq, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape, false);
        let enc = encode(&mut tape, &pv, &MaskedInput::unmasked(&seq), false).unwrap();
        let logits = decode_basic(&mut tape, &pv, enc.embedding, &dec).unwrap();

        let h = encoder(&params, seq.ids())[0].clone();
        let tok = param(&params, "token_embeddings");
        let pos = param(&params, "position_embeddings");
        let mut ctx: Mat = vec![h];
        for (i, &id) in dec.ids.iter().enumerate().skip(1) {
            ctx.push(tok[id].iter().zip(&pos[i]).map(|(a, b)| a + b).collect());
        }
        let full = vec![vec![true; ctx.len()]; ctx.len()];
        let want = tied_logits(&params, &block(&params, "decoder", &ctx, &ctx, &full));
        assert!(max_abs_diff(tape.value(logits).data(), &flat(&want)) < 1e-9);
    }
}

#[test]
fn hidden_entries_get_exactly_zero_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vis = build_visibility(9, 0.6, &mut rng).unwrap();
    let scores = rand_t(10, 10, 3);
    let mut tape = Tape::new();
    let s = tape.constant(scores);
    let w = tape.softmax_masked(s, &vis.additive_mask()).unwrap();
    for i in 0..10 {
        let row = &tape.value(w).data()[i * 10..(i + 1) * 10];
        for (j, &x) in row.iter().enumerate() {
            if !vis.is_visible(i, j) {
                assert_eq!(x, 0.0);
            }
        }
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let dense = AttnVisibility::dense(3).unwrap();
    let m = dense.additive_mask();
    for i in 0..4 {
        for j in 0..4 {
            assert_eq!(m.get(i, j), if i == j { MASKED } else { 0.0 });
        }
    }
}

#[test]
fn contrastive_matches_double_loop() {
    for seed in 0..3 {
        assert!(checks::contrastive(seed) < 1e-9);
    }
}

#[test]
fn retrieval_matches_full_sort() {
    for seed in 0..3 {
        assert_eq!(checks::retrieval_mismatches(seed), 0);
    }
}

#[test]
fn metrics_match_definitions() {
    for seed in 0..3 {
        assert!(checks::metrics_err(seed) < 1e-12);
    }
}

#[test]
fn spearman_matches_rank_oracles() {
    for seed in 0..3 {
        assert!(checks::spearman_err(seed) < 1e-9);
    }
}
