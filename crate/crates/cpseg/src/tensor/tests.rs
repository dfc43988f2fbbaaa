use super::gradcheck::gradient_check;
use super::params::{Init, ParamStore};
use super::*;
use crate::rng::Rng;

fn approx(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn approx_all(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| approx(*x, *y, tol))
}

/// Independent triple-loop product, the reference for matmul.
fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Reference softmax through log-sum-exp, a different arithmetic path than
/// the implementation's exp-and-normalize.
fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| (v - lse).exp()).collect()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let eye = tape.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false).unwrap();
    let m = tape.leaf(vec![3.0, 4.0, 5.0, 6.0], vec![2, 2], false).unwrap();
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.data(out), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_zero() {
    let mut tape = Tape::new();
    let a = tape.leaf(vec![1.0, 2.0], vec![1, 2], false).unwrap();
    let b = tape.leaf(vec![0.0, 0.0], vec![2, 1], false).unwrap();
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.data(out), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Rng::new(5);
    let (m, k, n) = (3, 4, 2);
    let a: Vec<f64> = (0..m * k).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    let mut tape = Tape::new();
    let ta = tape.leaf(a.clone(), vec![m, k], false).unwrap();
    let tb = tape.leaf(b.clone(), vec![k, n], false).unwrap();
    let out = tape.matmul(ta, tb).unwrap();
    let expected = matmul_oracle(&a, &b, m, k, n);
    assert!(approx_all(tape.data(out), &expected, 1e-12));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
    let b = tape.leaf(vec![0.0; 4], vec![2, 2], false).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
}

#[test]
fn softmax_symmetry_and_shift_invariance() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![0.0, 0.0], vec![1, 2], false).unwrap();
    let s = tape.softmax_last(x).unwrap();
    assert!(approx_all(tape.data(s), &[0.5, 0.5], 1e-15));

    for c in [-3.0, 0.0, 41.5] {
        let x = tape.leaf(vec![c, c, c], vec![1, 3], false).unwrap();
        let s = tape.softmax_last(x).unwrap();
        let third = 1.0 / 3.0;
        assert!(approx_all(tape.data(s), &[third, third, third], 1e-9));
    }
}

#[test]
fn softmax_large_inputs_no_overflow() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1000.0, 0.0], vec![1, 2], false).unwrap();
    let s = tape.softmax_last(x).unwrap();
    let expected = softmax_oracle(&[1000.0, 0.0]);
    assert!(tape.data(s).iter().all(|v| v.is_finite()));
    assert!(approx_all(tape.data(s), &expected, 1e-15));
    assert!(approx(tape.data(s)[0], 1.0, 1e-12));
}

#[test]
fn softmax_rows_sum_to_one_and_match_oracle() {
    let mut rng = Rng::new(77);
    let mut tape = Tape::new();
    for _ in 0..50 {
        let k = rng.range_inclusive(2, 8);
        let row: Vec<f64> = (0..k).map(|_| rng.uniform_in(-30.0, 30.0)).collect();
        let x = tape.leaf(row.clone(), vec![1, k], false).unwrap();
        let s = tape.softmax_last(x).unwrap();
        let sum: f64 = tape.data(s).iter().sum();
        assert!(approx(sum, 1.0, 1e-9));
        assert!(approx_all(tape.data(s), &softmax_oracle(&row), 1e-12));
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![f64::NAN, 0.0], vec![1, 2], false).unwrap();
    assert!(matches!(tape.softmax_last(x), Err(CpSegError::Numeric(_))));
}

#[test]
fn cross_entropy_perfect_and_uniform() {
    let mut tape = Tape::new();
    let p = tape.leaf(vec![1.0, 0.0], vec![1, 2], false).unwrap();
    let l = tape.cross_entropy_probs(p, &[0]).unwrap();
    assert!(tape.value(l).abs() < 1e-10);

    let p = tape.leaf(vec![0.5, 0.5], vec![1, 2], false).unwrap();
    let l = tape.cross_entropy_probs(p, &[1]).unwrap();
    assert!(approx(tape.value(l), std::f64::consts::LN_2, 1e-12));
}

#[test]
fn cross_entropy_matches_scalar_loop_oracle() {
    let mut rng = Rng::new(9);
    let (n, k) = (5, 3);
    let mut probs = vec![0.0; n * k];
    for row in probs.chunks_mut(k) {
        let raw: Vec<f64> = (0..k).map(|_| rng.uniform_in(0.05, 1.0)).collect();
        let s: f64 = raw.iter().sum();
        for (dst, v) in row.iter_mut().zip(&raw) {
            *dst = v / s;
        }
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();

    let mut oracle = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        oracle -= probs[i * k + y].ln();
    }
    oracle /= n as f64;

    let mut tape = Tape::new();
    let p = tape.leaf(probs, vec![n, k], false).unwrap();
    let l = tape.cross_entropy_probs(p, &labels).unwrap();
    assert!(approx(tape.value(l), oracle, 1e-12));
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut tape = Tape::new();
    let p = tape.leaf(vec![0.5, 0.5], vec![1, 2], false).unwrap();
    let err = tape.cross_entropy_probs(p, &[2]).unwrap_err();
    assert!(matches!(err, CpSegError::Label { label: 2, index: 0, .. }));
}

#[test]
fn cross_entropy_nonnegative_after_softmax() {
    let mut rng = Rng::new(21);
    let mut tape = Tape::new();
    for _ in 0..100 {
        let k = rng.range_inclusive(2, 6);
        let z: Vec<f64> = (0..k).map(|_| rng.uniform_in(-20.0, 20.0)).collect();
        let x = tape.leaf(z, vec![1, k], false).unwrap();
        let p = tape.softmax_last(x).unwrap();
        let l = tape.cross_entropy_probs(p, &[rng.below(k)]).unwrap();
        assert!(tape.value(l) >= 0.0);
    }
}

#[test]
fn cosine_self_orthogonal_and_formula() {
    let mut tape = Tape::new();
    let u = tape.leaf(vec![1.0, 2.0, -1.0], vec![3], false).unwrap();
    let c = tape.cosine_similarity(u, u).unwrap();
    assert!(approx(tape.value(c), 1.0, 1e-12));

    let a = tape.leaf(vec![1.0, 0.0], vec![2], false).unwrap();
    let b = tape.leaf(vec![0.0, 5.0], vec![2], false).unwrap();
    let c = tape.cosine_similarity(a, b).unwrap();
    assert!(approx(tape.value(c), 0.0, 1e-15));

    let u = tape.leaf(vec![1.0, 2.0, 3.0], vec![3], false).unwrap();
    let v = tape.leaf(vec![4.0, 5.0, 6.0], vec![3], false).unwrap();
    let c = tape.cosine_similarity(u, v).unwrap();
    let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
    assert!(approx(tape.value(c), expected, 1e-12));
}

#[test]
fn cosine_zero_norm_is_degenerate() {
    let mut tape = Tape::new();
    let u = tape.leaf(vec![0.0, 0.0], vec![2], false).unwrap();
    let v = tape.leaf(vec![1.0, 0.0], vec![2], false).unwrap();
    assert!(matches!(
        tape.cosine_similarity(u, v),
        Err(CpSegError::DegenerateVector(_))
    ));
}

#[test]
fn layer_norm_constant_vector_yields_beta() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![4.0, 4.0, 4.0], vec![1, 3], false).unwrap();
    let gamma = tape.leaf(vec![2.0, 2.0, 2.0], vec![3], false).unwrap();
    let beta = tape.leaf(vec![0.5, -0.5, 0.0], vec![3], false).unwrap();
    let out = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(approx_all(tape.data(out), &[0.5, -0.5, 0.0], 1e-12));
}

#[test]
fn add_identity() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.0, -2.0, 3.5], vec![1, 3], false).unwrap();
    let z = tape.leaf(vec![0.0, 0.0, 0.0], vec![1, 3], false).unwrap();
    let out = tape.add(x, z).unwrap();
    assert_eq!(tape.data(out), tape.data(x));
}

#[test]
fn backward_linear_and_square() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], true).unwrap();
    let loss = tape.sum_all(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(vec![3.0], vec![1], true).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
    assert!(matches!(tape.backward(x), Err(CpSegError::Contract(_))));
}

#[test]
fn grad_accumulates_until_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
    let loss = tape.sum_all(x);
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

/// Gradient check over a composite touching most pointwise ops.
#[test]
fn gradient_check_elementwise_suite() {
    let mut rng = Rng::new(31);
    let mut store = ParamStore::new();
    let x = store.register("x", &[2, 4], Init::ScaledUniform { fan_in: 2 }, &mut rng).unwrap();
    let y = store.register("y", &[2, 4], Init::ScaledUniform { fan_in: 2 }, &mut rng).unwrap();
    let gamma = store.register("gamma", &[4], Init::Ones, &mut rng).unwrap();
    let beta = store.register("beta", &[4], Init::ScaledUniform { fan_in: 4 }, &mut rng).unwrap();

    let report = gradient_check(&mut store, 1e-5, |tape, bind| {
        let a = tape.add(bind.get(x), bind.get(y))?;
        let b = tape.sub(a, bind.get(y))?;
        let c = tape.mul(b, bind.get(x))?;
        let d = tape.gelu(c);
        let e = tape.relu(d);
        let f = tape.layer_norm(e, bind.get(gamma), bind.get(beta), 1e-5)?;
        let g = tape.scale(f, 1.7);
        let h = tape.add_const(g, 0.3);
        Ok(tape.mean_all(h))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn gradient_check_matmul_bias_softmax_ce() {
    let mut rng = Rng::new(32);
    let mut store = ParamStore::new();
    let w = store.register("w", &[3, 4], Init::ScaledUniform { fan_in: 3 }, &mut rng).unwrap();
    let b = store.register("b", &[4], Init::ScaledUniform { fan_in: 4 }, &mut rng).unwrap();
    let x = store.register("x", &[5, 3], Init::ScaledUniform { fan_in: 3 }, &mut rng).unwrap();

    let report = gradient_check(&mut store, 1e-5, |tape, bind| {
        let h = tape.matmul(bind.get(x), bind.get(w))?;
        let h = tape.add_bias(h, bind.get(b))?;
        let p = tape.softmax_last(h)?;
        tape.cross_entropy_probs(p, &[0, 3, 1, 2, 0])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn gradient_check_quadratic_is_nearly_exact() {
    let mut rng = Rng::new(33);
    let mut store = ParamStore::new();
    let x = store.register("x", &[1, 6], Init::ScaledUniform { fan_in: 1 }, &mut rng).unwrap();
    let report = gradient_check(&mut store, 1e-5, |tape, bind| {
        let sq = tape.mul(bind.get(x), bind.get(x))?;
        Ok(tape.sum_all(sq))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn gradient_check_structural_ops() {
    let mut rng = Rng::new(34);
    let mut store = ParamStore::new();
    let a = store.register("a", &[3, 4], Init::ScaledUniform { fan_in: 2 }, &mut rng).unwrap();
    let b = store.register("b", &[2, 4], Init::ScaledUniform { fan_in: 2 }, &mut rng).unwrap();
    let col = store.register("col", &[5, 1], Init::ScaledUniform { fan_in: 1 }, &mut rng).unwrap();

    let report = gradient_check(&mut store, 1e-5, |tape, bind| {
        let cat = tape.concat_rows(&[bind.get(a), bind.get(b)])?;
        let left = tape.slice_cols(cat, 0, 2)?;
        let right = tape.slice_cols(cat, 2, 2)?;
        let swapped = tape.concat_cols(&[right, left])?;
        let top = tape.slice_rows(swapped, 0, 1)?;
        let rep = tape.repeat_rows(top, 5)?;
        let gathered = tape.gather_rows(swapped, &[0, 2, 4, 1, 1])?;
        let mixed = tape.mul(rep, gathered)?;
        let scaled = tape.mul_colvec(mixed, bind.get(col))?;
        let t = tape.transpose(scaled)?;
        let sums = tape.row_sums(t)?;
        Ok(tape.mean_all(sums))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn gradient_check_l2_normalize_and_cosine() {
    let mut rng = Rng::new(35);
    let mut store = ParamStore::new();
    let x = store.register("x", &[4, 3], Init::ScaledUniform { fan_in: 1 }, &mut rng).unwrap();
    let u = store.register("u", &[5], Init::ScaledUniform { fan_in: 1 }, &mut rng).unwrap();
    let v = store.register("v", &[5], Init::ScaledUniform { fan_in: 1 }, &mut rng).unwrap();

    let report = gradient_check(&mut store, 1e-5, |tape, bind| {
        let n = tape.l2_normalize_rows(bind.get(x))?;
        let s = tape.sum_all(n);
        let c = tape.cosine_similarity(bind.get(u), bind.get(v))?;
        tape.add(s, c)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn gradient_check_image_ops() {
    let mut rng = Rng::new(36);
    let mut store = ParamStore::new();
    let x = store.register("x", &[3, 3, 2], Init::ScaledUniform { fan_in: 1 }, &mut rng).unwrap();
    let w = store.register("w", &[3, 3, 2, 2], Init::ScaledUniform { fan_in: 18 }, &mut rng).unwrap();
    let b = store.register("b", &[2], Init::ScaledUniform { fan_in: 2 }, &mut rng).unwrap();

    let report = gradient_check(&mut store, 1e-5, |tape, bind| {
        let up = tape.bilinear_upsample(bind.get(x), 2)?;
        let conv = tape.conv3x3(up, bind.get(w), bind.get(b))?;
        let out = tape.add(up, conv)?;
        Ok(tape.mean_all(out))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn gradient_check_rejects_bad_step() {
    let mut rng = Rng::new(37);
    let mut store = ParamStore::new();
    let x = store.register("x", &[2], Init::ScaledUniform { fan_in: 1 }, &mut rng).unwrap();
    let err = gradient_check(&mut store, 1e-2, |tape, bind| Ok(tape.sum_all(bind.get(x))));
    assert!(matches!(err, Err(CpSegError::Config(_))));
}

#[test]
fn seeded_init_is_bit_identical() {
    let build = || {
        let mut rng = Rng::new(99);
        let mut store = ParamStore::new();
        store.register("w", &[16, 16], Init::ScaledUniform { fan_in: 16 }, &mut rng).unwrap();
        store.register("b", &[16], Init::ScaledUniform { fan_in: 16 }, &mut rng).unwrap();
        store
    };
    let a = build();
    let b = build();
    for ((_, ea), (_, eb)) in a.entries().zip(b.entries()) {
        assert!(ea.data.iter().zip(&eb.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn bilinear_upsample_2x2_to_4x4_closed_form() {
    // Half-pixel-centers stencil for factor 2: destination coordinates map to
    // source offsets [-0.25, 0.25, 0.75, 1.25], clamped, i.e. 1-d weights
    // rows [1,0], [0.75,0.25], [0.25,0.75], [0,1].
    let (a, b, c, d) = (1.0, 2.0, -3.0, 5.0);
    let w1d = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
    let src = [[a, b], [c, d]];
    let mut expected = vec![0.0; 16];
    for y in 0..4 {
        for x in 0..4 {
            let mut v = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    v += w1d[y][sy] * w1d[x][sx] * src[sy][sx];
                }
            }
            expected[y * 4 + x] = v;
        }
    }
    let mut tape = Tape::new();
    let x = tape.leaf(vec![a, b, c, d], vec![2, 2, 1], false).unwrap();
    let up = tape.bilinear_upsample(x, 2).unwrap();
    assert!(approx_all(tape.data(up), &expected, 1e-12));
}

#[test]
fn bilinear_of_constant_is_constant() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![0.7; 2 * 3 * 4], vec![2, 3, 4], false).unwrap();
    let up = tape.bilinear_upsample(x, 4).unwrap();
    assert_eq!(tape.shape(up), &[8, 12, 4]);
    assert!(tape.data(up).iter().all(|v| approx(*v, 0.7, 1e-12)));
}

#[test]
fn conv3x3_zero_weights_passes_bias() {
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.0; 4 * 4 * 3], vec![4, 4, 3], false).unwrap();
    let w = tape.leaf(vec![0.0; 9 * 3 * 2], vec![3, 3, 3, 2], false).unwrap();
    let b = tape.leaf(vec![0.25, -0.5], vec![2], false).unwrap();
    let out = tape.conv3x3(x, w, b).unwrap();
    for pix in tape.data(out).chunks(2) {
        assert_eq!(pix, &[0.25, -0.5]);
    }
}

#[test]
fn conv3x3_center_tap_is_identity() {
    // Kernel with 1.0 at the center tap for matching channels copies the input.
    let mut tape = Tape::new();
    let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], vec![3, 3, 1], false).unwrap();
    let mut w = vec![0.0; 9];
    w[4] = 1.0; // dy=1, dx=1
    let w = tape.leaf(w, vec![3, 3, 1, 1], false).unwrap();
    let b = tape.leaf(vec![0.0], vec![1], false).unwrap();
    let out = tape.conv3x3(x, w, b).unwrap();
    assert!(approx_all(tape.data(out), tape.data(x), 1e-15));
}

mod properties {
    use super::*;
    use crate::rng::Rng as SeededRng;
    use proptest::prelude::*;

    fn small_dims() -> impl Strategy<Value = (usize, usize, usize)> {
        (1usize..=6, 1usize..=6, 1usize..=6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matmul_agrees_with_oracle((m, k, n) in small_dims(), seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let mut tape = Tape::new();
            let ta = tape.leaf(a.clone(), vec![m, k], false).unwrap();
            let tb = tape.leaf(b.clone(), vec![k, n], false).unwrap();
            let out = tape.matmul(ta, tb).unwrap();
            let expected = matmul_oracle(&a, &b, m, k, n);
            prop_assert!(approx_all(tape.data(out), &expected, 1e-12));
        }

        #[test]
        fn softmax_shift_invariant(k in 1usize..=8, c in -50.0f64..50.0, seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let row: Vec<f64> = (0..k).map(|_| rng.uniform_in(-10.0, 10.0)).collect();
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(row, vec![1, k], false).unwrap();
            let xs = tape.leaf(shifted, vec![1, k], false).unwrap();
            let s = tape.softmax_last(x).unwrap();
            let ss = tape.softmax_last(xs).unwrap();
            for (a, b) in tape.data(s).iter().zip(tape.data(ss)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        /// Differentiable op gradients match central finite differences on
        /// random small shapes.
        #[test]
        fn pointwise_grads_match_finite_differences(
            rows in 1usize..=4,
            cols in 1usize..=8,
            which in 0usize..6,
            seed in 0u64..1000,
        ) {
            let mut rng = SeededRng::new(seed.wrapping_mul(31).wrapping_add(which as u64));
            let mut store = ParamStore::new();
            let x = store
                .register("x", &[rows, cols], Init::ScaledUniform { fan_in: 1 }, &mut rng)
                .unwrap();
            let gamma = store.register("gamma", &[cols], Init::Ones, &mut rng).unwrap();
            let beta = store.register("beta", &[cols], Init::Zeros, &mut rng).unwrap();

            let report = gradient_check(&mut store, 1e-5, |tape, bind| {
                let xt = bind.get(x);
                let y = match which {
                    0 => tape.gelu(xt),
                    1 => {
                        // relu has a kink at zero; shift away from it
                        let shifted = tape.add_const(xt, 0.6);
                        tape.relu(shifted)
                    }
                    2 => tape.softmax_last(xt)?,
                    3 => tape.layer_norm(xt, bind.get(gamma), bind.get(beta), 1e-5)?,
                    4 => tape.mul(xt, xt)?,
                    _ => tape.scale(xt, -1.4),
                };
                Ok(tape.mean_all(y))
            })
            .unwrap();
            prop_assert!(report.max_rel_error < 1e-4, "rel err {}", report.max_rel_error);
        }
    }
}
