use super::*;
use crate::error::Error;

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut tape = Tape::new();
    let eye = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let m = t2(2, 3, &[1.5, -2.0, 3.25, 0.0, 7.0, -1.0]);
    let x = tape.constant(m.clone());
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y), &m);
}

#[test]
fn swish_at_one() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(1.0));
    let y = tape.swish(x).unwrap();
    // 1 / (1 + e^-1)
    assert!((tape.value(y).item() - 0.731_058_578_630_004_9).abs() < 1e-12);
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![0.3, -1.2, 4.0, 2.5]));
    let loss = tape.sum(w).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(w).data(), &[1.0; 4]);
}

#[test]
fn mean_of_square_gradient_is_two_w_over_n() {
    let w0 = vec![0.3, -1.2, 4.0, 2.5, -0.7];
    let n = w0.len() as f64;
    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(w0.clone()));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.mean(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    for (gi, wi) in g.wrt(w).data().iter().zip(&w0) {
        assert!((gi - 2.0 * wi / n).abs() < 1e-15);
    }
}

#[test]
fn detached_parameter_gets_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::vector(vec![3.0, 4.0, 5.0]));
    let loss = tape.sum(used).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(unused), Tensor::zeros(&[3]));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.scale(w, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn constants_are_not_recorded() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.tanh(a).unwrap();
    let _ = tape.sum(b).unwrap();
    assert_eq!(tape.recorded_ops(), 0);
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(2, 3, &[0.0; 6]));
    let b = tape.constant(t2(2, 3, &[0.0; 6]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "matmul", .. }), "{err}");
    let c = tape.constant(t2(3, 2, &[0.0; 6]));
    assert!(tape.add(a, c).is_err());
}

#[test]
fn non_finite_output_names_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1e308, 1e308]));
    let err = tape.scale(a, 10.0).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale" }));
}

#[test]
fn log_softmax_normalises() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(3, 4, &[0.1, 2.0, -3.0, 0.5, 9.0, 9.0, 9.0, 9.0, -40.0, 1.0, 0.0, 3.0]));
    let y = tape.log_softmax(x).unwrap();
    for r in 0..3 {
        let s: f64 = tape.value(y).row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn causal_softmax_masks_future_columns() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(3, 3, &[1.0, 5.0, 7.0, 2.0, 3.0, 9.0, 0.0, 0.0, 0.0]));
    let y = tape.causal_softmax(x).unwrap();
    let v = tape.value(y);
    assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
    assert_eq!(v.row(1)[2], 0.0);
    assert!((v.row(1).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!((v.row(2)[0] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn causal_conv_ignores_future_frames() {
    let x0: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut x1 = x0.clone();
    // frames 5.. (3 channels each) replaced
    for v in &mut x1[15..] {
        *v += 100.0;
    }
    let w: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 - 0.3).collect();
    let run = |x: Vec<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(t2(8, 3, &x));
        let w = tape.constant(t2(3, 3, &w));
        let b = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let y = tape.depthwise_conv1d_causal(x, w, b).unwrap();
        tape.value(y).clone()
    };
    let (y0, y1) = (run(x0), run(x1));
    assert_eq!(&y0.data()[..15], &y1.data()[..15]);
    assert_ne!(&y0.data()[15..], &y1.data()[15..]);
}

#[test]
fn max_pool_drops_trailing_frame() {
    let mut tape = Tape::new();
    let x = tape.constant(t2(5, 1, &[1.0, 3.0, 2.0, -1.0, 8.0]));
    let y = tape.max_pool1d_time(x).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
    assert_eq!(tape.shape(y), &[2, 1]);
}

#[test]
fn dropout_needs_seed_in_training() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0; 8]));
    assert!(matches!(tape.dropout(x, 0.1, true), Err(Error::Contract(_))));
    assert_eq!(tape.dropout(x, 0.1, false).unwrap(), x);
    assert!(tape.dropout(x, 1.0, false).is_err());
}

#[test]
fn dropout_is_inverted_and_replayable() {
    let run = |seed| {
        let mut tape = Tape::with_seed(seed);
        let x = tape.constant(Tensor::vector(vec![1.0; 1000]));
        let y = tape.dropout(x, 0.25, true).unwrap();
        tape.value(y).clone()
    };
    let a = run(7);
    assert_eq!(a, run(7));
    assert_ne!(a, run(8));
    for v in a.data() {
        assert!(*v == 0.0 || (*v - 1.0 / 0.75).abs() < 1e-15);
    }
    let dropped = a.data().iter().filter(|v| **v == 0.0).count();
    assert!((180..320).contains(&dropped), "{dropped}");
}

#[test]
fn concat_and_slice_invert_each_other() {
    let mut tape = Tape::new();
    let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t2(2, 1, &[5.0, 6.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
    let back = tape.slice(c, 1, 2, 1).unwrap();
    assert_eq!(tape.value(back).data(), &[5.0, 6.0]);
    let rows = tape.concat(&[a, a], 0).unwrap();
    assert_eq!(tape.shape(rows), &[4, 2]);
}

#[test]
fn embedding_rejects_out_of_range_index() {
    let mut tape = Tape::new();
    let t = tape.constant(t2(3, 2, &[0.0; 6]));
    assert!(tape.embedding(t, &[0, 3]).is_err());
}

#[test]
fn constant_function_has_zero_gradients() {
    let x = Tensor::vector(vec![0.5, -0.25, 2.0]);
    let report = check_gradients(
        |tape, v| {
            let z = tape.scale(v[0], 0.0)?;
            tape.sum(z)
        },
        &[x],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.max_rel_error(), 0.0);
}

#[test]
fn gradcheck_rejects_unseeded_stochastic_program() {
    let x = Tensor::vector(vec![0.5, -0.25, 2.0]);
    let opts = GradCheckOptions {
        seed: None,
        ..GradCheckOptions::default()
    };
    let res = check_gradients(
        |tape, v| {
            let d = tape.dropout(v[0], 0.5, true)?;
            tape.sum(d)
        },
        &[x],
        opts,
    );
    assert!(matches!(res, Err(Error::Contract(_))));
}

#[test]
fn gradcheck_flags_wrong_gradient() {
    // relu at exactly zero: the analytic subgradient is 0, the central
    // difference sees 0.5
    let x = Tensor::vector(vec![0.0, 1.0]);
    let report = check_gradients(
        |tape, v| {
            let r = tape.relu(v[0])?;
            tape.sum(r)
        },
        &[x],
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.flagged(), vec![0]);
}
