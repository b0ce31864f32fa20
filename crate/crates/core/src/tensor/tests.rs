use super::*;
use crate::gradcheck::{check_inputs, rel_err};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
use super::Rng;

fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new([rows, cols], v.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-scale, scale))
}

#[test]
fn matmul_identity_and_hand_case() {
    let a = random(&[3, 3], 1, 2.0);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let av = tape.constant(a.clone());
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);

    let x = tape.constant(t2(2, 2, &[1., 2., 3., 4.]));
    let y = tape.constant(t2(2, 1, &[0., 1.]));
    let out = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(out).data(), &[2., 4.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_grad_is_row_sums_of_b_transpose() {
    let a = random(&[3, 4], 2, 1.0);
    let b = random(&[4, 5], 3, 1.0);
    let mut tape = Tape::new();
    let av = tape.leaf(a, true);
    let bv = tape.constant(b.clone());
    let p = tape.matmul(av, bv).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    let g = tape.grad(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..5).map(|j| b.at2(k, j)).sum();
            assert!((g.at2(i, k) - expect).abs() < 1e-12);
        }
    }
    let r = check_inputs(
        &[random(&[3, 4], 4, 1.0), random(&[4, 5], 5, 1.0)],
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            Ok(t.sum(p))
        },
        50,
        1e-6,
        0,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([1, 4]));
    let s = tape.softmax(z, 1).unwrap();
    assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let big = tape.constant(t2(1, 2, &[1000., 0.]));
    let s = tape.softmax(big, 1).unwrap();
    let d = tape.value(s).data();
    assert!(d[0].is_finite() && (d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);

    assert!(matches!(tape.softmax(big, 2), Err(crate::Error::AxisOutOfRange { .. })));
}

#[test]
fn softmax_jvp_matches_finite_differences() {
    for seed in 0..5 {
        let x = random(&[5], seed, 2.0);
        let v = random(&[5], 100 + seed, 1.0);
        let r = check_inputs(
            &[x],
            |t, vars| {
                let s = t.softmax(vars[0], 0)?;
                let w = t.constant(v.clone());
                let p = t.mul(s, w)?;
                Ok(t.sum(p))
            },
            5,
            1e-6,
            seed,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}

#[test]
fn softmax_on_inner_axis() {
    let x = random(&[2, 3, 4], 9, 3.0);
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let s = tape.softmax(v, 1).unwrap();
    let d = tape.value(s).data();
    for o in 0..2 {
        for i in 0..4 {
            let total: f64 = (0..3).map(|k| d[(o * 3 + k) * 4 + i]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn gelu_examples_and_derivative() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new([2], vec![0.0, 10.0]).unwrap());
    let y = tape.gelu(x);
    assert_eq!(tape.value(y).data()[0], 0.0);
    assert!((tape.value(y).data()[1] - 10.0).abs() < 1e-6);

    let grid = Tensor::from_fn([61], |i| -3.0 + 0.1 * i as f64);
    let r = check_inputs(&[grid], |t, v| {
        let g = t.gelu(v[0]);
        Ok(t.sum(g))
    }, 61, 1e-6, 0)
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn gelu_is_erf_form_not_tanh() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::scalar(1.0));
    let y = tape.gelu(x);
    // x * Phi(x) at 1.0; the tanh approximation gives 0.841192
    assert!((tape.value(y).data()[0] - 0.841_344_746_068_542_9).abs() < 1e-12);
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::<f64>::new();
    let x = random(&[1, 1, 4, 5], 1, 1.0);
    let xv = tape.constant(x.clone());
    let w = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(xv, w, b, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let ones = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let y = tape.conv2d(ones, k, b, 1).unwrap();
    let d = tape.value(y).data();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert_eq!(d[4], 9.0);
    assert_eq!([d[0], d[2], d[6], d[8]], [4.0; 4]);
    assert_eq!([d[1], d[3], d[5], d[7]], [6.0; 4]);

    let bad = tape.constant(Tensor::zeros([1, 2, 3, 3]));
    assert!(tape.conv2d(bad, k, b, 1).is_err());
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let x = random(&[1, 1, 5, 5], 7, 1.0);
    let r = check_inputs(
        &[random(&[2, 1, 3, 3], 8, 1.0), random(&[2], 9, 1.0), x.clone()],
        |t, v| {
            let y = t.conv2d(v[2], v[0], v[1], 1)?;
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        },
        30,
        1e-6,
        0,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full([1, 2, 5, 7], 3.0));
    let p = tape.maxpool2d(c, 2).unwrap();
    assert_eq!(tape.shape(p), &[1, 2, 2, 3]);
    assert!(tape.value(p).data().iter().all(|&v| v == 3.0));

    let x = tape.constant(Tensor::new([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
    let p = tape.maxpool2d(x, 2).unwrap();
    assert_eq!(tape.value(p).data(), &[4.0]);
}

#[test]
fn maxpool_gradient_is_one_hot_per_window() {
    for seed in 0..50 {
        // quantized values force ties regularly
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn([1, 1, 4, 4], |_| rng.below(4) as f64);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let p = tape.maxpool2d(v, 2).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        let g = tape.grad(v).unwrap().data().to_vec();
        for wy in 0..2 {
            for wx in 0..2 {
                let idx: Vec<usize> = (0..4).map(|k| (wy * 2 + k / 2) * 4 + wx * 2 + k % 2).collect();
                let ones: Vec<usize> = idx.iter().copied().filter(|&i| g[i] == 1.0).collect();
                assert_eq!(ones.len(), 1);
                assert!(idx.iter().all(|&i| g[i] == 0.0 || g[i] == 1.0));
                let max = idx.iter().map(|&i| x.data()[i]).fold(f64::MIN, f64::max);
                let first = *idx.iter().find(|&&i| x.data()[i] == max).unwrap();
                assert_eq!(ones[0], first);
            }
        }
    }
}

#[test]
fn batchnorm_training_normalizes_and_shifts() {
    let x = random(&[4, 3, 2, 2], 11, 5.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::full([3], 1.0));
    let b0 = tape.constant(Tensor::zeros([3]));
    let b5 = tape.constant(Tensor::full([3], 5.0));
    let (y, _) = tape.batch_norm_train(xv, g, b0).unwrap();
    let (y5, _) = tape.batch_norm_train(xv, g, b5).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..4).map(move |i| (n * 3 + c) * 4 + i))
            .map(|i| tape.value(y).data()[i])
            .collect();
        let m = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
        let m5 = (0..4)
            .flat_map(|n| (0..4).map(move |i| (n * 3 + c) * 4 + i))
            .map(|i| tape.value(y5).data()[i])
            .sum::<f64>()
            / 16.0;
        assert!((m5 - 5.0).abs() < 1e-9);
    }
}

#[test]
fn batchnorm_rejects_single_sample_batch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 3]));
    let g = tape.constant(Tensor::full([3], 1.0));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(tape.batch_norm_train(x, g, b).is_err());
    assert!(tape.batch_norm_eval(x, g, b, &[0.0; 3], &[1.0; 3]).is_ok());
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let w = random(&[3, 2, 2, 2], 13, 1.0);
    for training in [true, false] {
        let r = check_inputs(
            &[random(&[3, 2, 2, 2], 12, 2.0), random(&[2], 14, 1.0), random(&[2], 15, 1.0)],
            |t, v| {
                let y = if training {
                    t.batch_norm_train(v[0], v[1], v[2])?.0
                } else {
                    t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0])?
                };
                let wv = t.constant(w.clone());
                let p = t.mul(y, wv)?;
                Ok(t.sum(p))
            },
            24,
            1e-6,
            1,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-3, "training={training} {r:?}");
    }
}

#[test]
fn layernorm_gradients_match_finite_differences() {
    let w = random(&[3, 4], 21, 1.0);
    let r = check_inputs(
        &[random(&[3, 4], 22, 2.0), random(&[4], 23, 1.0), random(&[4], 24, 1.0)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        },
        12,
        1e-6,
        2,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn dropout_contract() {
    let x = random(&[10, 10], 3, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let mut rng = Rng::new(0);
    assert_eq!(tape.dropout(v, 0.0, &mut rng, true).unwrap(), v);
    assert_eq!(tape.dropout(v, 0.7, &mut rng, false).unwrap(), v);
    assert!(tape.dropout(v, 1.0, &mut rng, true).is_err());

    let ones = tape.constant(Tensor::full([100_000], 1.0));
    let d = tape.dropout(ones, 0.2, &mut Rng::new(42), true).unwrap();
    let zeros = tape.value(d).data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
    assert!((0.19..=0.21).contains(&zeros), "{zeros}");
    assert!(tape
        .value(d)
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));

    let d2 = tape.dropout(ones, 0.2, &mut Rng::new(42), true).unwrap();
    assert_eq!(tape.value(d), tape.value(d2));
}

#[test]
fn backward_examples_and_accumulation() {
    let x = random(&[3, 2], 5, 1.0);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 1.0));
    tape.backward(s).unwrap();
    assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 2.0));

    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    for (g, x) in tape.grad(v).unwrap().data().iter().zip(x.data()) {
        assert!((g - 2.0 * x).abs() < 1e-15);
    }
    assert!(tape.backward(sq).is_err());
}

#[test]
fn constants_never_receive_gradients() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full([2], 1.0));
    let p = tape.leaf(Tensor::full([2], 2.0), true);
    let m = tape.mul(c, p).unwrap();
    let s = tape.sum(m);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(p).is_some());
}

#[test]
fn narrow_concat_transpose_grads() {
    let w = random(&[4, 5], 31, 1.0);
    let r = check_inputs(
        &[random(&[4, 3], 32, 1.0), random(&[4, 2], 33, 1.0)],
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let n = t.narrow(c, 1, 1, 3)?;
            let tr = t.transpose(n)?;
            let back = t.transpose(tr)?;
            let c2 = t.concat(&[back, n], 1)?;
            let n2 = t.narrow(c2, 1, 0, 5)?;
            let wv = t.constant(w.clone());
            let sq = t.mul(n2, n2)?;
            let p = t.mul(sq, wv)?;
            Ok(t.sum(p))
        },
        20,
        1e-6,
        3,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn losses_match_closed_forms() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros([2, 5]));
    let l = tape.cross_entropy(z, &[0, 4]).unwrap();
    assert!((tape.value(l).data()[0] - 5f64.ln()).abs() < 1e-12);
    assert!(tape.cross_entropy(z, &[0, 5]).is_err());

    let z = tape.constant(Tensor::zeros([2, 1]));
    let l = tape.bce_with_logits(z, &[0, 1]).unwrap();
    assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    assert!(tape.bce_with_logits(z, &[0, 2]).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_one_hot() {
    let logits = random(&[1, 5], 40, 3.0);
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone(), true);
    let l = tape.cross_entropy(v, &[2]).unwrap();
    tape.backward(l).unwrap();
    let max = logits.data().iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = logits.data().iter().map(|x| (x - max).exp()).sum();
    for (c, g) in tape.grad(v).unwrap().data().iter().enumerate() {
        let p = (logits.data()[c] - max).exp() / z;
        let expect = p - if c == 2 { 1.0 } else { 0.0 };
        assert!((g - expect).abs() < 1e-12);
    }
    let r = check_inputs(&[random(&[3, 5], 41, 3.0)], |t, v| t.cross_entropy(v[0], &[0, 3, 4]), 15, 1e-6, 0)
        .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
    let r = check_inputs(&[random(&[4, 1], 42, 3.0)], |t, v| t.bce_with_logits(v[0], &[0, 1, 1, 0]), 4, 1e-6, 0)
        .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn rel_err_floor() {
    assert_eq!(rel_err(0.0, 0.0), 0.0);
    assert!(rel_err(1.0, 1.00001) < 1.1e-5);
}

proptest! {
    #[test]
    fn matmul_and_conv_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6,
                               h in 3usize..8, w in 3usize..8, pad in 0usize..2) {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([m, k]));
        let b = tape.constant(Tensor::zeros([k, n]));
        let p = tape.matmul(a, b).unwrap();
        prop_assert_eq!(tape.shape(p), &[m, n]);

        let x = tape.constant(Tensor::zeros([2, k, h, w]));
        let wt = tape.constant(Tensor::zeros([n, k, 3, 3]));
        let bias = tape.constant(Tensor::zeros([n]));
        let y = tape.conv2d(x, wt, bias, pad).unwrap();
        prop_assert_eq!(tape.shape(y), &[2, n, h + 2 * pad - 2, w + 2 * pad - 2]);
        let pooled = tape.maxpool2d(x, 2).unwrap();
        prop_assert_eq!(tape.shape(pooled), &[2, k, h / 2, w / 2]);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = values.len();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([1, n], values).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        let total: f64 = tape.value(s).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(s).data().iter().all(|&v| v >= 0.0));
    }
}
