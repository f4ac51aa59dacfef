use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssmil::autodiff::{grad_check, Graph, OpKind, Var};
use ssmil::ssm::{Discretization, SsmMode};
use ssmil::tensor::Tensor;
use ssmil::Result;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum `Σ w ⊙ out` so that every output coordinate matters.
fn weighted_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(&mut rng, &shape, -1.0, 1.0));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

#[test]
fn matmul_against_unit_column() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = g.constant(Tensor::from_f64(vec![2, 1], &[1.0, 0.0]).unwrap());
    let c = g.op_forward(&OpKind::MatMul, &[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 3.0]);
    assert_eq!(g.shape(c), &[2, 1]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![2], &[0.0, 0.0]).unwrap());
    let y = g.op_forward(&OpKind::Softmax { axis: 0 }, &[x]).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let empty = g.constant(Tensor::zeros(vec![3, 0]));
    assert!(g.softmax(empty, 1).is_err());
}

#[test]
fn identity_kernel_convolution() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![3, 1], &[1.5, -2.0, 7.0]).unwrap());
    let k = g.constant(Tensor::from_f64(vec![1, 3], &[0.0, 1.0, 0.0]).unwrap());
    let y = g.op_forward(&OpKind::DepthwiseDilatedConv1d { dilation: 1 }, &[x, k]).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, -2.0, 7.0]);
}

#[test]
fn dilated_convolution_taps() {
    // kernel [1, 10, 100], dilation 2: y[l] = x[l-2] + 10 x[l] + 100 x[l+2]
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let k = g.constant(Tensor::from_f64(vec![1, 3], &[1.0, 10.0, 100.0]).unwrap());
    let y = g.conv1d_depthwise(x, k, 2).unwrap();
    assert_eq!(g.value(y).data(), &[310.0, 420.0, 531.0, 42.0, 53.0]);
}

#[test]
fn shape_errors_name_the_kind() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.op_forward(&OpKind::MatMul, &[a, b]).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(vec![3, 2]));
    let err = g.op_forward(&OpKind::Add, &[a, c]).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(g.op_forward(&OpKind::Exp, &[a, c]).is_err());
    assert!(g.op_forward(&OpKind::Slice { axis: 1, start: 2, len: 2 }, &[a]).is_err());
    assert!(g.select(&[true; 4], a, b).is_err());
    assert!(g.scatter_rows(a, &[1, 1], 4).is_err());
}

#[test]
fn square_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn exp_gradient_at_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(vec![1], &[0.0]).unwrap());
    let e = g.exp(x);
    let s = g.sum(e);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(vec![2]));
    let e = g.exp(x);
    assert!(g.backward(e).is_err());
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let c = g.constant(Tensor::scalar(5.0));
    let y = g.mul(x, c).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    assert!(grads.get(c).is_none());
}

#[test]
fn square_passes_grad_check() {
    let report = grad_check(
        |g, p| g.mul(p[0], p[0]),
        &[Tensor::scalar(3.0)],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_reports_non_finite() {
    let err = grad_check(
        |g, p| {
            let e = g.exp(p[0]);
            let e = g.exp(e);
            Ok(g.exp(e))
        },
        &[Tensor::scalar(10.0)],
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, ssmil::Error::NonFinite(_)));
}

#[test]
fn fan_out_sums_both_uses() {
    // f(x) = sum(exp(x) ⊙ x) uses x twice.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let report = grad_check(
        |g, p| {
            let e = g.exp(p[0]);
            let m = g.mul(e, p[0])?;
            Ok(g.sum(m))
        },
        std::slice::from_ref(&x),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");

    let mut g = Graph::<f64>::new();
    let v = g.param(x.clone());
    let e = g.exp(v);
    let m = g.mul(e, v).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    for (gv, xv) in grads.get(v).unwrap().data().iter().zip(x.data()) {
        assert!((gv - xv.exp() * (1.0 + xv)).abs() < 1e-12);
    }
}

#[test]
fn three_layer_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = vec![
        random(&mut rng, &[5, 4], -1.0, 1.0),
        random(&mut rng, &[4, 6], -0.5, 0.5),
        random(&mut rng, &[6], -0.5, 0.5),
        random(&mut rng, &[6, 3], -0.5, 0.5),
        random(&mut rng, &[3], 0.5, 1.5),
        random(&mut rng, &[3, 2], -0.5, 0.5),
    ];
    let report = grad_check(
        |g, p| {
            let h = g.matmul(p[0], p[1])?;
            let h = g.add_row(h, p[2])?;
            let h = g.tanh(h);
            let h = g.matmul(h, p[3])?;
            let h = g.rms_norm(h, p[4])?;
            let h = g.softplus(h);
            let h = g.matmul(h, p[5])?;
            let h = g.mean(h, 0)?;
            g.cross_entropy(h, 1)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn forward_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 5], -2.0, 2.0);
    let k = random(&mut rng, &[5, 3], -1.0, 1.0);
    let run = || {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv1d_depthwise(xv, kv, 2).unwrap();
        let y = g.softmax(y, 1).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gather_scatter_reshape_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[4, 3], -1.0, 1.0);
    let report = grad_check(
        |g, p| {
            let s = g.scatter_rows(p[0], &[5, 0, 2, 3], 6)?;
            let r = g.reshape(s, vec![3, 6])?;
            let t = g.sigmoid(r);
            let r = g.reshape(t, vec![6, 3])?;
            let back = g.gather_rows(r, &[3, 5, 5, 0])?;
            weighted_loss(g, back, 9)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn softplus_large_argument_branch() {
    let report = grad_check(
        |g, p| {
            let s = g.softplus(p[0]);
            Ok(g.sum(s))
        },
        &[Tensor::from_f64(vec![3], &[35.0, -35.0, 29.0]).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn scan_gradients_all_parameters() {
    // 8 tokens, every input of the fused scan, both modes and both discretizations.
    for (mode, channels, groups, a_len) in [
        (SsmMode::Scalar { heads: 2 }, 4, 2, 2),
        (SsmMode::Diag, 3, 3, 3 * 2),
    ] {
        for method in [Discretization::Euler, Discretization::Zoh] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let len = 8;
            let params = vec![
                random(&mut rng, &[len, channels], -1.0, 1.0),
                random(&mut rng, &[len, groups], -1.0, 1.0),
                random(&mut rng, &[a_len], -0.5, 0.5),
                random(&mut rng, &[len, 2], -1.0, 1.0),
                random(&mut rng, &[len, 2], -1.0, 1.0),
            ];
            let keep: Vec<bool> = (0..len).map(|t| t % 3 != 1).collect();
            let exempt: Vec<bool> = (0..channels).map(|c| c == 0).collect();
            let report = grad_check(
                |g, p| {
                    let delta = g.softplus(p[1]);
                    let a = g.exp(p[2]);
                    let a = g.neg(a);
                    let y = g.selective_scan(p[0], delta, a, p[3], p[4], mode, method, Some(&keep), Some(&exempt))?;
                    weighted_loss(g, y, 4)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode:?} {method:?}: {report:?}");
        }
    }
}

/// Builds inputs for one op kind from a seed and small extents.
fn case(kind_id: usize, seed: u64, d: [usize; 3]) -> (OpKind, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [a, b, c] = d;
    match kind_id {
        0 => (OpKind::MatMul, vec![random(&mut rng, &[a, b], -1.0, 1.0), random(&mut rng, &[b, c], -1.0, 1.0)]),
        1 => (OpKind::Add, vec![random(&mut rng, &[a, b], -1.0, 1.0), random(&mut rng, &[a, b], -1.0, 1.0)]),
        2 => (OpKind::Mul, vec![random(&mut rng, &[a, b], -1.0, 1.0), random(&mut rng, &[a, b], -1.0, 1.0)]),
        3 => (OpKind::Exp, vec![random(&mut rng, &[a, b, c], -2.0, 2.0)]),
        4 => (OpKind::Softplus, vec![random(&mut rng, &[a, b], -3.0, 3.0)]),
        5 => (OpKind::RmsNorm, vec![random(&mut rng, &[a, b + 1], -1.0, 1.0), random(&mut rng, &[b + 1], 0.5, 1.5)]),
        6 => (OpKind::Softmax { axis: seed as usize % 3 }, vec![random(&mut rng, &[a, b, c], -2.0, 2.0)]),
        7 => {
            let k = 1 + seed as usize % 4;
            let dil = 1 + (seed as usize / 4) % 3;
            (
                OpKind::DepthwiseDilatedConv1d { dilation: dil },
                vec![random(&mut rng, &[a, b + 2, c], -1.0, 1.0), random(&mut rng, &[c, k], -1.0, 1.0)],
            )
        }
        8 => (OpKind::ReduceMean { axis: seed as usize % 3 }, vec![random(&mut rng, &[a, b, c], -1.0, 1.0)]),
        9 => (OpKind::ReduceMax { axis: seed as usize % 3 }, vec![random(&mut rng, &[a, b, c], -1.0, 1.0)]),
        10 => {
            let axis = seed as usize % 2;
            let other = if axis == 0 { [c, b] } else { [a, c] };
            (
                OpKind::Concat { axis },
                vec![random(&mut rng, &[a, b], -1.0, 1.0), random(&mut rng, &other, -1.0, 1.0)],
            )
        }
        11 => {
            let start = seed as usize % b;
            (OpKind::Slice { axis: 1, start, len: b - start }, vec![random(&mut rng, &[a, b, c], -1.0, 1.0)])
        }
        _ => {
            let mask = (0..a * b).map(|_| rng.random_bool(0.5)).collect();
            (
                OpKind::SelectByMask { mask },
                vec![random(&mut rng, &[a, b], -1.0, 1.0), random(&mut rng, &[a, b], -1.0, 1.0)],
            )
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_op_kind_matches_finite_differences(
        kind_id in 0usize..13,
        seed in any::<u64>(),
        d in [1usize..5, 1usize..5, 1usize..4],
    ) {
        let (kind, inputs) = case(kind_id, seed, d);
        let report = grad_check(
            |g, p| {
                let out = g.op_forward(&kind, p)?;
                weighted_loss(g, out, seed)
            },
            &inputs,
            1e-5,
        ).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{}: {:?}", kind.name(), report);
    }
}
