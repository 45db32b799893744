use super::gradcheck::{check_gradients, FD_TOLERANCE};
use super::*;
use crate::error::CpcError;
use crate::rng::{normal_tensor, seeded, uniform_tensor};

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut t = Tape::new();
    let i = t.constant(Tensor::identity(2));
    let v = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let out = t.matmul(i, v).unwrap();
    assert_eq!(t.value(out).values(), &[3.0, 4.0]);

    let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
    let out = t.matmul(a, v).unwrap();
    assert_eq!(t.value(out).values(), &[11.0]);
    assert_eq!(t.shape(out), &[1, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_ones_times_bt() {
    let mut rng = seeded(11);
    let a = normal_tensor(&[3, 4], &mut rng);
    let b = normal_tensor(&[4, 2], &mut rng);
    let mut t = Tape::new();
    let av = t.param(a);
    let bv = t.constant(b.clone());
    let c = t.matmul(av, bv).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap().get(av);
    // ones(3×2)·bᵀ: every row equals the row sums of b.
    for r in 0..3 {
        for k in 0..4 {
            let expect = b.row(k).iter().sum::<f64>();
            assert!((g.at2(r, k) - expect).abs() < 1e-12);
        }
    }
    let rep = check_gradients("matmul", &[normal_tensor(&[3, 4], &mut rng), b], None, |t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn conv1d_identity_kernel_and_lengths() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::matrix(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let k = t.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = t.conv1d(x, k, 1).unwrap();
    assert_eq!(t.value(y).values(), &[1.0, 2.0, 3.0, 4.0, 5.0]);

    let x = t.constant(Tensor::zeros(&[2, 10]));
    let k = t.constant(Tensor::zeros(&[3, 2, 4]));
    let y = t.conv1d(x, k, 2).unwrap();
    assert_eq!(t.shape(y), &[3, 4]);
}

#[test]
fn conv1d_rejects_short_input() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 3]));
    let k = t.constant(Tensor::zeros(&[1, 1, 4]));
    assert!(matches!(
        t.conv1d(x, k, 1),
        Err(CpcError::InputTooShort { len: 3, min: 4, .. })
    ));
}

#[test]
fn conv_stack_downsamples_by_160() {
    // Full-size audio encoder: strides [5,4,2,2,2], widths [10,8,4,4,4].
    let strides = [5, 4, 2, 2, 2];
    let widths = [10, 8, 4, 4, 4];
    let frames = |len: usize| {
        strides
            .iter()
            .zip(&widths)
            .try_fold(len, |l, (&s, &w)| conv_out_len(l, w, s))
    };
    assert_eq!(strides.iter().product::<usize>(), 160);
    // Valid convolution: each extra 160 input samples adds one output frame.
    let base = frames(20480).unwrap();
    assert_eq!(frames(20480 + 160).unwrap(), base + 1);
    assert_eq!(frames(20480 + 1600).unwrap(), base + 10);
}

fn gru_inputs(d: usize, e: usize, rng: &mut crate::rng::Rng) -> Vec<Tensor> {
    vec![
        uniform_tensor(&[d], 1.0, rng),
        uniform_tensor(&[e], 1.0, rng),
        uniform_tensor(&[3 * d, e], 0.8, rng),
        uniform_tensor(&[3 * d, d], 0.8, rng),
        uniform_tensor(&[3 * d], 0.5, rng),
        uniform_tensor(&[3 * d], 0.5, rng),
    ]
}

fn gru(t: &mut Tape, v: &[Var]) -> crate::error::Result<Var> {
    t.gru_step(
        v[0],
        v[1],
        GruVars {
            w_ih: v[2],
            w_hh: v[3],
            b_ih: v[4],
            b_hh: v[5],
        },
    )
}

#[test]
fn gru_zero_params_stay_at_zero() {
    let (d, e) = (3, 2);
    let inputs = vec![
        Tensor::zeros(&[d]),
        Tensor::zeros(&[e]),
        Tensor::zeros(&[3 * d, e]),
        Tensor::zeros(&[3 * d, d]),
        Tensor::zeros(&[3 * d]),
        Tensor::zeros(&[3 * d]),
    ];
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.into_iter().map(|x| t.constant(x)).collect();
    let h = gru(&mut t, &v).unwrap();
    assert_eq!(t.value(h).values(), &[0.0; 3]);
}

#[test]
fn gru_saturated_update_gate_carries_state() {
    let (d, e) = (3, 2);
    let mut rng = seeded(5);
    let mut inputs = gru_inputs(d, e, &mut rng);
    for j in d..2 * d {
        inputs[4].values_mut()[j] = 50.0;
    }
    let h0 = inputs[0].clone();
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.into_iter().map(|x| t.constant(x)).collect();
    let h = gru(&mut t, &v).unwrap();
    assert_close(t.value(h).values(), h0.values(), 1e-12);
}

#[test]
fn gru_gradients_match_finite_differences() {
    let mut rng = seeded(21);
    let inputs = gru_inputs(3, 2, &mut rng);
    let rep = check_gradients("gru_step", &inputs, None, |t, v| {
        let h = gru(t, v)?;
        let w = t.constant(Tensor::vector(vec![0.3, -1.2, 0.7]));
        let p = t.mul(h, w)?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn gru_dimension_mismatch() {
    let mut rng = seeded(2);
    let mut inputs = gru_inputs(3, 2, &mut rng);
    inputs[1] = Tensor::zeros(&[4]);
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.into_iter().map(|x| t.constant(x)).collect();
    assert!(gru(&mut t, &v).is_err());
}

#[test]
fn logsumexp_cases() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::vector(vec![0.0; 4]));
    let l = t.logsumexp(v).unwrap();
    assert!((t.value(l).values()[0] - 4f64.ln()).abs() < 1e-12);

    for c in [-3.5, 0.0, 17.25] {
        let v = t.constant(Tensor::vector(vec![c]));
        let l = t.logsumexp(v).unwrap();
        assert_eq!(t.value(l).values()[0], c);
    }

    let v = t.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let l = t.logsumexp(v).unwrap();
    assert!((t.value(l).values()[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    assert_eq!(logsumexp(&[]), None);
}

#[test]
fn backward_simple_rules() {
    let mut rng = seeded(3);
    let p0 = normal_tensor(&[2, 3], &mut rng);
    let mut t = Tape::new();
    let p = t.param(p0.clone());
    let s = t.sum(p);
    assert_eq!(t.backward(s).unwrap().get(p), Tensor::ones(&[2, 3]));

    let mut t = Tape::new();
    let p = t.param(p0.clone());
    let q = t.sum_squares(p);
    let l = t.scale(q, 0.5);
    assert_close(t.backward(l).unwrap().get(p).values(), p0.values(), 1e-15);
}

#[test]
fn backward_rejects_non_scalar_and_zeros_unreached() {
    let mut t = Tape::new();
    let p = t.param(Tensor::zeros(&[2]));
    let unused = t.param(Tensor::ones(&[3]));
    assert!(matches!(t.backward(p), Err(CpcError::NonScalarLoss(_))));
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(unused), Tensor::zeros(&[3]));
    assert!(!g.reached(unused));
}

#[test]
fn composite_conv_relu_matmul_gradients() {
    let mut rng = seeded(8);
    let inputs = vec![
        normal_tensor(&[2, 12], &mut rng),
        uniform_tensor(&[3, 2, 4], 0.5, &mut rng),
        uniform_tensor(&[3], 0.5, &mut rng),
        normal_tensor(&[3, 4], &mut rng),
    ];
    let rep = check_gradients("conv-relu-matmul", &inputs, None, |t, v| {
        let y = t.conv1d(v[0], v[1], 2)?;
        let y = t.add_channel_bias(y, v[2])?;
        let y = t.relu(y);
        let yt = t.transpose(y)?;
        let m = t.matmul(yt, v[3])?;
        let m = t.tanh(m);
        Ok(t.sum(m))
    })
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn grouped_scores_and_xent_gradients() {
    let mut rng = seeded(12);
    let inputs = vec![normal_tensor(&[6, 3], &mut rng), normal_tensor(&[4, 3], &mut rng)];
    let rep = check_gradients("grouped-xent", &inputs, None, |t, v| {
        let c = t.gather_rows(v[0], vec![0, 1, 2, 3, 4, 5, 5, 1, 2, 0, 3, 3])?;
        let p = t.sigmoid(v[1]);
        let s = t.grouped_dot(c, p, 3)?;
        t.softmax_xent(s, &[0, 1, 2, 0], Reduction::Mean)
    })
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn fault_injection_is_detected() {
    let mut rng = seeded(4);
    let inputs = vec![normal_tensor(&[2, 3], &mut rng), normal_tensor(&[3, 2], &mut rng)];
    let build = |t: &mut Tape, v: &[Var]| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    };
    let rep = check_gradients("matmul", &inputs, Some(OpKind::MatMul), build).unwrap();
    assert!(!rep.passed);
    assert!(rep.max_rel_error > FD_TOLERANCE);
}

#[test]
fn empty_check_passes_vacuously() {
    let rep = check_gradients("empty", &[], None, |t, _| {
        Ok(t.constant(Tensor::scalar(1.0)))
    })
    .unwrap();
    assert!(rep.passed);
    assert_eq!(rep.checked, 0);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = seeded(99);
        let a = normal_tensor(&[4, 5], &mut rng);
        let b = normal_tensor(&[5, 3], &mut rng);
        let mut t = Tape::new();
        let av = t.param(a);
        let bv = t.param(b);
        let c = t.matmul(av, bv).unwrap();
        let c = t.tanh(c);
        let l = t.logsumexp(c).unwrap();
        let g = t.backward(l).unwrap();
        (g.get(av), g.get(bv))
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn logsumexp_shift(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let base = logsumexp(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let s = logsumexp(&shifted).unwrap();
            prop_assert!((s - (base + c)).abs() <= 1e-12 * (1.0 + base.abs() + c.abs()) * 4.0);
        }

        #[test]
        fn forward_values_stay_finite(seed in 0u64..500) {
            let mut rng = seeded(seed);
            let mut t = Tape::new();
            let x = t.constant(normal_tensor(&[2, 9], &mut rng).map(|v| v * 30.0));
            let k = t.param(uniform_tensor(&[3, 2, 3], 2.0, &mut rng));
            let y = t.conv1d(x, k, 2).unwrap();
            let y = t.sigmoid(y);
            let z = t.tanh(y);
            let l = t.logsumexp(z).unwrap();
            prop_assert!(t.value(y).is_finite() && t.value(l).is_finite());
        }
    }
}
