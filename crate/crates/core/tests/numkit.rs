mod common;

use std::time::Instant;

use bidlab_core::numkit::{
    adam_step, conv1d, matmul, multi_head_attention, AdamConfig, AdamState, Conv1d, Linear, MultiHeadAttention, ParamStore,
    Tape, Tensor,
};
use bidlab_core::Error;
use common::worst_layer_grad_error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn layer_gradients_match_finite_differences() {
    let start = Instant::now();
    let worst = worst_layer_grad_error();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(worst < 1e-4, "worst relative gradient error {worst:.2e}");
    assert!(elapsed < 5.0, "gradient checks took {elapsed:.2}s");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 1, 3), (4, 6, 2)] {
        let a = Tensor::<f64>::randn(&[m, k], &mut r);
        let b = Tensor::<f64>::randn(&[k, n], &mut r);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.get2(i, l) * b.get2(l, j);
                }
                assert!((c.get2(i, j) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matmul_rejects_mismatched_inner_dims() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[2, 3]);
    assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
}

#[test]
fn conv_matches_direct_sum() {
    let x = Tensor::<f64>::randn(&[2, 8], &mut rng(2));
    let w = Tensor::<f64>::randn(&[3, 2, 3], &mut rng(3));
    let y = conv1d(&x, &w).unwrap();
    assert_eq!(y.shape(), &[3, 8]);
    let xd = x.data();
    let wd = w.data();
    for o in 0..3 {
        for t in 0..8i64 {
            let mut s = 0.0;
            for c in 0..2 {
                for k in 0..3i64 {
                    let src = t + k - 1;
                    if (0..8).contains(&src) {
                        s += wd[(o * 2 + c) * 3 + k as usize] * xd[c * 8 + src as usize];
                    }
                }
            }
            assert!((y.data()[o * 8 + t as usize] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_box_filter_and_identity() {
    let x = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
    let ones = Tensor::from_f64(&[1, 1, 3], &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(conv1d(&x, &ones).unwrap().data(), &[3.0, 6.0, 5.0]);

    let x = Tensor::<f64>::randn(&[2, 5], &mut rng(4));
    let mut id = Tensor::<f64>::zeros(&[2, 2, 3]);
    id.data_mut()[1] = 1.0; // out 0, in 0, centre tap
    id.data_mut()[2 * 3 + 3 + 1] = 1.0; // out 1, in 1, centre tap
    assert_eq!(conv1d(&x, &id).unwrap().data(), x.data());
}

#[test]
fn conv_rejects_even_kernel() {
    let mut store = ParamStore::<f64>::new();
    assert!(matches!(Conv1d::new(&mut store, "c", 1, 1, 2, &mut rng(0)), Err(Error::Config(_))));
}

fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn attention_matches_explicit_softmax() {
    let (seq, dim, heads) = (3, 4, 2);
    let dh = dim / heads;
    let mut store = ParamStore::<f64>::new();
    let layer = MultiHeadAttention::new(&mut store, "mha", dim, heads, &mut rng(5)).unwrap();
    for t in store.tensors_mut() {
        *t = Tensor::randn(t.shape(), &mut rng(t.len() as u64 + 17));
    }
    let x = Tensor::<f64>::randn(&[seq, dim], &mut rng(6));
    let (out, weights) = multi_head_attention(&x, &layer, &store).unwrap();

    let lin = |l: &Linear, x: &Tensor<f64>| {
        let y = matmul(x, store.get(l.w)).unwrap();
        let b = store.get(l.b).data().to_vec();
        let (r, c) = y.dims2();
        Tensor::from_f64(&[r, c], &(0..r * c).map(|i| y.data()[i] + b[i % c]).collect::<Vec<_>>()).unwrap()
    };
    let q = lin(&layer.q, &x);
    let k = lin(&layer.k, &x);
    let v = lin(&layer.v, &x);
    let mut cat = vec![0.0; seq * dim];
    for h in 0..heads {
        for i in 0..seq {
            let scores: Vec<f64> = (0..seq)
                .map(|j| (0..dh).map(|c| q.get2(i, h * dh + c) * k.get2(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax_row(&scores);
            for j in 0..seq {
                assert!((weights[h].get2(i, j) - a[j]).abs() < 1e-12);
            }
            for c in 0..dh {
                cat[i * dim + h * dh + c] = (0..seq).map(|j| a[j] * v.get2(j, h * dh + c)).sum();
            }
        }
    }
    let expected = lin(&layer.o, &Tensor::from_f64(&[seq, dim], &cat).unwrap());
    assert!(out.max_abs_diff(&expected) < 1e-10);
}

#[test]
fn attention_single_token_has_unit_weight() {
    let mut store = ParamStore::<f64>::new();
    let layer = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng(7)).unwrap();
    let x = Tensor::<f64>::randn(&[1, 4], &mut rng(8));
    let (_, weights) = multi_head_attention(&x, &layer, &store).unwrap();
    for w in weights {
        assert_eq!(w.data(), &[1.0]);
    }
}

#[test]
fn attention_identical_tokens_is_uniform() {
    let mut store = ParamStore::<f64>::new();
    let layer = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng(9)).unwrap();
    let row = [0.3, -1.2, 0.5, 2.0];
    let x = Tensor::<f64>::from_f64(&[4, 4], &row.repeat(4)).unwrap();
    let (out, weights) = multi_head_attention(&x, &layer, &store).unwrap();
    for w in weights {
        assert!(w.data().iter().all(|a| (a - 0.25).abs() < 1e-12));
    }
    for i in 1..4 {
        for c in 0..4 {
            assert!((out.get2(i, c) - out.get2(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_indivisible_width() {
    let mut store = ParamStore::<f64>::new();
    assert!(matches!(
        MultiHeadAttention::new(&mut store, "mha", 5, 2, &mut rng(0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let mut store = ParamStore::<f64>::new();
        let layer = Linear::new(&mut store, "lin", 3, 2, &mut rng(10));
        let x = Tensor::randn(&[6, 3], &mut rng(11));
        let mut state = AdamState::new(&store, AdamConfig::with_lr(0.01));
        for _ in 0..20 {
            let mut t = Tape::new();
            let p = t.bind(&store);
            let xv = t.constant(x.clone());
            let y = layer.forward(&mut t, &p, xv).unwrap();
            let sq = t.square(y);
            let loss = t.mean_all(sq);
            let g = t.backward(loss).unwrap().params(&p, &store);
            adam_step(&mut store, &g, &mut state).unwrap();
        }
        store.tensors().iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_two_steps_closed_form() {
    // Constant gradient g: m̂ = g and v̂ = g² at every step, so each step moves by lr·g/(|g|+ε).
    let mut store = ParamStore::<f64>::new();
    store.add("x", Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
    let cfg = AdamConfig { clip_norm: None, ..AdamConfig::with_lr(0.05) };
    let mut state = AdamState::new(&store, cfg);
    let g = Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap();
    for _ in 0..2 {
        adam_step(&mut store, std::slice::from_ref(&g), &mut state).unwrap();
    }
    let step = |gi: f64| 2.0 * 0.05 * gi / (gi.abs() + 1e-8);
    let got = store.tensors()[0].data();
    assert!((got[0] - (1.0 - step(0.5))).abs() < 1e-12);
    assert!((got[1] - (-1.0 - step(-2.0))).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..6) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::<f64>::from_f64(&[rows, cols], &vals[..rows * cols]).unwrap();
        let mut t = Tape::<f64>::inference();
        let xv = t.constant(x.clone());
        let s = t.softmax(xv);
        let y = t.value(s);
        for r in 0..rows {
            let row: Vec<f64> = (0..cols).map(|c| y.get2(r, c)).collect();
            prop_assert!(row.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let expected = softmax_row(&(0..cols).map(|c| x.get2(r, c)).collect::<Vec<_>>());
            for c in 0..cols {
                prop_assert!((row[c] - expected[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(vals in prop::collection::vec(-10.0f64..10.0, 2..8), shift in -100.0f64..100.0) {
        let n = vals.len();
        let a = Tensor::<f64>::from_f64(&[1, n], &vals).unwrap();
        let b = a.map(|v| v + shift);
        let mut t = Tape::<f64>::inference();
        let av = t.constant(a);
        let bv = t.constant(b);
        let sa = t.softmax(av);
        let sb = t.softmax(bv);
        prop_assert!(t.value(sa).max_abs_diff(t.value(sb)) < 1e-10);
    }

    #[test]
    fn matmul_transpose_identity(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let a = Tensor::<f64>::randn(&[m, k], &mut rng(seed));
        let b = Tensor::<f64>::randn(&[k, n], &mut rng(seed + 1));
        let ab_t = matmul(&a, &b).unwrap().transpose();
        let bt_at = matmul(&b.transpose(), &a.transpose()).unwrap();
        prop_assert!(ab_t.max_abs_diff(&bt_at) < 1e-12);
    }
}
