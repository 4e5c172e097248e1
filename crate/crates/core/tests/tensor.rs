use approx::assert_relative_eq;
use proptest::prelude::*;
use ssvae_core::tensor::{finite_difference_check, Tape, Tensor};
use ssvae_core::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("valid tensor")
}

#[test]
fn elementwise_forward_values() {
    let tape: Tape<f64> = Tape::new();
    let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t64(&[2, 2], &[10.0, 20.0, 30.0, 40.0]);
    assert_eq!(tape.add(&a, &b).unwrap().data(), &[11.0, 22.0, 33.0, 44.0]);
    assert_eq!(tape.sub(&b, &a).unwrap().data(), &[9.0, 18.0, 27.0, 36.0]);
    assert_eq!(tape.mul(&a, &b).unwrap().data(), &[10.0, 40.0, 90.0, 160.0]);
    assert_eq!(tape.scale(&a, -2.0).unwrap().data(), &[-2.0, -4.0, -6.0, -8.0]);
}

#[test]
fn broadcasting_row_and_scalar() {
    let tape: Tape<f64> = Tape::new();
    let a = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let row = t64(&[3], &[10.0, 20.0, 30.0]);
    let s = Tensor::scalar(100.0);
    assert_eq!(tape.add(&a, &row).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    assert_eq!(tape.add(&row, &a).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    assert_eq!(tape.mul(&a, &s).unwrap().data(), &[100.0, 200.0, 300.0, 400.0, 500.0, 600.0]);
    let bad = t64(&[2], &[1.0, 2.0]);
    assert!(matches!(tape.add(&a, &bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn softplus_at_zero_is_ln_two() {
    let tape: Tape<f64> = Tape::new();
    let x = t64(&[1], &[0.0]);
    let y = tape.softplus(&x).unwrap();
    assert_relative_eq!(y.data()[0], std::f64::consts::LN_2, max_relative = 1e-12);
    // Large inputs must not overflow into inf.
    let big = tape.softplus(&t64(&[2], &[80.0, -80.0])).unwrap();
    assert!(big.data()[0].is_finite() && (big.data()[0] - 80.0).abs() < 1e-12);
    assert!(big.data()[1] > 0.0 && big.data()[1] < 1e-30);
}

#[test]
fn softmax_uniform_and_stability() {
    let tape: Tape<f64> = Tape::new();
    let y = tape.softmax(&t64(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
    for &v in y.data() {
        assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-12);
    }
    // Shift invariance with large offsets.
    let a = tape.softmax(&t64(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
    let b = tape.softmax(&t64(&[1, 3], &[1001.0, 1002.0, 1003.0])).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert_relative_eq!(x, y, max_relative = 1e-12);
    }
    let ls = tape.log_softmax(&t64(&[1, 2], &[0.0, 0.0])).unwrap();
    for &v in ls.data() {
        assert_relative_eq!(v, -std::f64::consts::LN_2, max_relative = 1e-12);
    }
}

#[test]
fn matmul_matches_naive_triple_loop() {
    let tape: Tape<f64> = Tape::new();
    let (m, k, n) = (2, 3, 4);
    let a_data: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.7 - 1.0).collect();
    let b_data: Vec<f64> = (0..k * n).map(|i| (i as f64) * -0.3 + 0.5).collect();
    let c = tape
        .matmul(&t64(&[m, k], &a_data), &t64(&[k, n], &b_data))
        .unwrap();
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a_data[i * k + l] * b_data[l * n + j];
            }
            assert_relative_eq!(c.data()[i * n + j], acc, max_relative = 1e-12);
        }
    }
    let bad = tape.matmul(&t64(&[2, 3], &a_data), &t64(&[2, 3], &a_data));
    assert!(matches!(bad, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn concat_and_slice_forward() {
    let tape: Tape<f64> = Tape::new();
    let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t64(&[2, 1], &[9.0, 8.0]);
    let c = tape.concat(&[&a, &b], 1).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let s = tape.slice(&c, 1, 2, 1).unwrap();
    assert_eq!(s.shape(), &[2, 1]);
    assert_eq!(s.data(), &[9.0, 8.0]);
    let rows = tape.concat(&[&a, &a], 0).unwrap();
    assert_eq!(rows.shape(), &[4, 2]);
    assert_eq!(&rows.data()[..4], &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn reductions_and_gather() {
    let tape: Tape<f64> = Tape::new();
    let a = t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(tape.sum(&a, None).unwrap().data(), &[21.0]);
    assert_eq!(tape.sum(&a, Some(0)).unwrap().data(), &[5.0, 7.0, 9.0]);
    assert_eq!(tape.sum(&a, Some(1)).unwrap().data(), &[6.0, 15.0]);
    assert_eq!(tape.mean(&a, Some(1)).unwrap().data(), &[2.0, 5.0]);
    assert_eq!(tape.mean(&a, None).unwrap().data(), &[3.5]);

    let g = tape.gather_rows(&a, &[1, 0, 1]).unwrap();
    assert_eq!(g.shape(), &[3, 3]);
    assert_eq!(g.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert!(matches!(
        tape.gather_rows(&a, &[2]),
        Err(Error::TokenOutOfRange { id: 2, vocab: 2, position: 0 })
    ));
}

#[test]
fn backward_square_via_mul() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.watch(&t64(&[1], &[3.0]));
    let y = tape.mul(&x, &x).unwrap();
    let loss = tape.sum(&y, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_relative_eq!(grads.wrt(&x).unwrap().data()[0], 6.0, max_relative = 1e-12);
}

#[test]
fn backward_softplus_grad_at_zero_is_half() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.watch(&t64(&[1], &[0.0]));
    let y = tape.softplus(&x).unwrap();
    let loss = tape.sum(&y, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_relative_eq!(grads.wrt(&x).unwrap().data()[0], 0.5, max_relative = 1e-12);
}

#[test]
fn detach_blocks_gradient_flow() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.watch(&t64(&[1], &[2.0]));
    // d/dx [x * stop_grad(x)] = stop_grad(x) = 2, not 2x = 4.
    let y = tape.mul(&x, &x.detach()).unwrap();
    let loss = tape.sum(&y, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_relative_eq!(grads.wrt(&x).unwrap().data()[0], 2.0, max_relative = 1e-12);
}

#[test]
fn backward_is_linear_in_upstream_scale() {
    let run = |factor: f64| -> Vec<f64> {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(&t64(&[3], &[0.3, -0.7, 1.2]));
        let h = tape.tanh(&x).unwrap();
        let s = tape.sum(&h, None).unwrap();
        let loss = tape.scale(&s, factor).unwrap();
        let grads = tape.backward(&loss).unwrap();
        grads.wrt(&x).unwrap().data().to_vec()
    };
    let g1 = run(1.0);
    let g3 = run(3.0);
    for (a, b) in g1.iter().zip(&g3) {
        assert_relative_eq!(3.0 * a, *b, max_relative = 1e-12);
    }
}

#[test]
fn masked_entries_receive_zero_gradient() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.watch(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let mask = t64(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
    let masked = tape.mul(&x, &mask).unwrap();
    let loss = tape.sum(&masked, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn duplicate_gather_ids_accumulate_gradient() {
    let tape: Tape<f64> = Tape::new();
    let table = tape.watch(&t64(&[3, 2], &[0.0; 6]));
    let rows = tape.gather_rows(&table, &[1, 1, 2]).unwrap();
    let loss = tape.sum(&rows, None).unwrap();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.wrt(&table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
}

#[test]
fn kl_categorical_values_and_edge_cases() {
    let tape: Tape<f64> = Tape::new();
    let uniform = t64(&[2], &[0.5, 0.5]);
    // Identical distributions: KL = 0.
    let q = t64(&[1, 2], &[0.5, 0.5]);
    assert_relative_eq!(tape.kl_categorical(&q, &uniform).unwrap().data()[0], 0.0);
    // Point mass vs uniform over 2: KL = ln 2, with 0 * log 0 treated as 0.
    let point = t64(&[1, 2], &[1.0, 0.0]);
    assert_relative_eq!(
        tape.kl_categorical(&point, &uniform).unwrap().data()[0],
        std::f64::consts::LN_2,
        max_relative = 1e-12
    );
    // Rows that do not sum to one are rejected.
    let bad = t64(&[1, 2], &[0.9, 0.3]);
    assert!(tape.kl_categorical(&bad, &uniform).is_err());
}

#[test]
fn backward_errors_are_reported() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.watch(&t64(&[2], &[1.0, 2.0]));
    let y = tape.mul(&x, &x).unwrap();
    assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss { .. })));

    let loss = tape.sum(&y, None).unwrap();
    tape.backward(&loss).expect("first backward");
    assert!(matches!(tape.backward(&loss), Err(Error::TapeConsumed)));

    let other: Tape<f64> = Tape::new();
    let c = Tensor::scalar(1.0);
    assert!(matches!(other.backward(&c), Err(Error::LossNotOnTape)));

    // Tensors from one tape cannot feed another.
    let t1: Tape<f64> = Tape::new();
    let t2: Tape<f64> = Tape::new();
    let w = t1.watch(&t64(&[1], &[1.0]));
    assert!(matches!(t2.exp(&w), Err(Error::TapeMismatch { .. })));
}

#[test]
fn checked_tape_flags_non_finite_results() {
    let tape: Tape<f64> = Tape::new_checked();
    let x = t64(&[2], &[1.0, 0.0]);
    let err = tape.log(&x).unwrap_err();
    assert!(matches!(err, Error::Numeric { op: "log", index: 1 }));
    // The unchecked tape lets the same value through.
    let loose: Tape<f64> = Tape::new();
    assert!(loose.log(&x).unwrap().data()[1].is_infinite());
}

#[test]
fn composite_gradient_matches_finite_differences() {
    // exp, matmul, softplus, softmax, mul, concat, slice, sum in one graph.
    let w = t64(&[3, 4], &[0.2, -0.4, 0.6, 0.1, -0.3, 0.5, -0.1, 0.7, 0.05, -0.6, 0.3, -0.2]);
    let x = t64(&[2, 3], &[0.4, -0.2, 0.9, -0.5, 0.3, 0.1]);
    let report = finite_difference_check(&[w.clone(), x.clone()], 1e-5, |tape, ins| {
        let h = tape.matmul(&ins[1], &ins[0])?;
        let s = tape.softplus(&h)?;
        let p = tape.softmax(&s)?;
        let e = tape.exp(&tape.scale(&h, 0.1)?)?;
        let joined = tape.concat(&[&p, &e], 1)?;
        let cut = tape.slice(&joined, 1, 1, 5)?;
        let sq = tape.mul(&cut, &cut)?;
        tape.sum(&sq, None)
    })
    .expect("fd check runs");
    assert!(report.non_finite.is_empty());
    assert!(
        report.max_rel_error < 1e-4,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn fd_negative_control_detects_wrong_gradient() {
    // f(x) = x * stop_grad(x) evaluates to x^2 but its analytic gradient is
    // x instead of 2x, so the checker must report a large error.
    let x = t64(&[2], &[1.5, -0.8]);
    let report = finite_difference_check(&[x], 1e-5, |tape, ins| {
        let y = tape.mul(&ins[0], &ins[0].detach())?;
        tape.sum(&y, None)
    })
    .expect("fd check runs");
    assert!(
        report.max_rel_error > 1e-2,
        "negative control too small: {}",
        report.max_rel_error
    );
}

#[test]
fn log_softmax_gradient_matches_fd() {
    let x = t64(&[2, 3], &[0.3, -1.2, 0.8, 2.0, 0.0, -0.5]);
    let w = t64(&[2, 3], &[1.0, -0.5, 0.25, 0.7, -1.0, 0.4]);
    let report = finite_difference_check(&[x], 1e-6, |tape, ins| {
        let ls = tape.log_softmax(&ins[0])?;
        let weighted = tape.mul(&ls, &w)?;
        tape.sum(&weighted, None)
    })
    .expect("fd check runs");
    assert!(report.max_rel_error < 1e-6, "error {}", report.max_rel_error);
}

#[test]
fn kl_categorical_gradient_matches_fd() {
    // Probabilities produced by softmax so perturbed inputs stay on the
    // simplex.
    let logits = t64(&[2, 3], &[0.3, -0.7, 1.1, -0.2, 0.4, 0.0]);
    let prior = t64(&[3], &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    let report = finite_difference_check(&[logits], 1e-6, |tape, ins| {
        let q = tape.softmax(&ins[0])?;
        let kl = tape.kl_categorical(&q, &prior)?;
        tape.sum(&kl, None)
    })
    .expect("fd check runs");
    assert!(report.max_rel_error < 1e-6, "error {}", report.max_rel_error);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || -> Vec<f64> {
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(&t64(&[2, 3], &[0.3, -1.2, 0.8, 2.0, 0.0, -0.5]));
        let h = tape.tanh(&x).unwrap();
        let p = tape.softmax(&h).unwrap();
        let loss = tape.sum(&p, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let mut out = p.data().to_vec();
        out.extend_from_slice(grads.wrt(&x).unwrap().data());
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn f32_mode_produces_close_values() {
    let tape: Tape<f32> = Tape::new();
    let x = Tensor::<f32>::new(vec![1, 3], vec![0.5, -0.5, 2.0]).unwrap();
    let p = tape.softmax(&x).unwrap();
    let sum: f32 = p.data().iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..8, seedling in 0u64..1000) {
        let n = rows * cols;
        let data: Vec<f64> = (0..n)
            .map(|i| (((seedling + i as u64) * 2654435761 % 1000) as f64) / 100.0 - 5.0)
            .collect();
        let tape: Tape<f64> = Tape::new();
        let p = tape.softmax(&t64(&[rows, cols], &data)).unwrap();
        for r in 0..rows {
            let s: f64 = p.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            for &v in &p.data()[r * cols..(r + 1) * cols] {
                prop_assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn slice_concat_round_trip(rows in 1usize..5, cols in 2usize..7, cut in 1usize..6) {
        prop_assume!(cut < cols);
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 2.0).collect();
        let tape: Tape<f64> = Tape::new();
        let x = t64(&[rows, cols], &data);
        let left = tape.slice(&x, 1, 0, cut).unwrap();
        let right = tape.slice(&x, 1, cut, cols - cut).unwrap();
        let rejoined = tape.concat(&[&left, &right], 1).unwrap();
        prop_assert_eq!(rejoined.shape(), x.shape());
        prop_assert_eq!(rejoined.data(), x.data());
    }

    #[test]
    fn sum_then_backward_gives_unit_gradients(rows in 1usize..4, cols in 1usize..6) {
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let tape: Tape<f64> = Tape::new();
        let x = tape.watch(&t64(&[rows, cols], &data));
        let loss = tape.sum(&x, None).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let ones = vec![1.0; n];
        prop_assert_eq!(grads.wrt(&x).unwrap().data(), ones.as_slice());
    }
}
