use flowfilter::diffcore::{
    concat, grad_check, selective_scan, DiffError, Elementwise, ParamSet, Reduction, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum so every output entry carries a distinct cotangent.
fn project<'t>(tape: &'t Tape, v: Var<'t>) -> Var<'t> {
    let shape = v.shape();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + (i as f64 * 0.71).sin()).collect()).unwrap();
    v.mul(tape.constant(w)).unwrap().sum()
}

fn check_unary(op: impl for<'t> Fn(Var<'t>) -> Var<'t>, lo: f64, hi: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    let x = ps.add("x", random(&[3, 4], &mut rng, lo, hi));
    let err = grad_check::<_, DiffError>(|t, p| Ok(project(t, op(t.param(p, x)))), &ps, H).unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn unary_gradients() {
    check_unary(|v| v.exp(), -2.0, 2.0);
    check_unary(|v| v.log().unwrap(), 0.2, 2.0);
    check_unary(|v| v.tanh(), -2.0, 2.0);
    check_unary(|v| v.silu(), -2.0, 2.0);
    check_unary(|v| v.neg(), -2.0, 2.0);
    check_unary(|v| v.scale(-1.7), -2.0, 2.0);
    check_unary(|v| v.add_scalar(0.4), -2.0, 2.0);
    check_unary(|v| v.sqrt(), 0.2, 2.0);
    check_unary(|v| v.softplus(), -2.0, 2.0);
    check_unary(|v| v.sigmoid(), -2.0, 2.0);
    check_unary(|v| v.square(), -2.0, 2.0);
    check_unary(|v| v.clamp(-5.0, 5.0), -2.0, 2.0);
}

#[test]
fn binary_gradients_with_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for bshape in [vec![2, 3, 4], vec![1], vec![4], vec![3, 4], vec![2, 3, 1]] {
        let mut ps = ParamSet::new();
        let a = ps.add("a", random(&[2, 3, 4], &mut rng, -2.0, 2.0));
        let b = ps.add("b", random(&bshape, &mut rng, 0.5, 2.0));
        for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul, Elementwise::Div] {
            let err = grad_check::<_, DiffError>(
                |t, p| {
                    let out = t.elementwise(kind, t.param(p, a), Some(t.param(p, b)))?;
                    Ok(project(t, out))
                },
                &ps,
                H,
            )
            .unwrap();
            assert!(err < 1e-5, "{kind:?} {bshape:?}: {err}");
        }
    }
}

#[test]
fn matmul_and_bmm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    let a = ps.add("a", random(&[3, 4], &mut rng, -2.0, 2.0));
    let b = ps.add("b", random(&[4, 5], &mut rng, -2.0, 2.0));
    let err = grad_check::<_, DiffError>(|t, p| Ok(project(t, t.param(p, a).matmul(t.param(p, b))?)), &ps, H).unwrap();
    assert!(err < 1e-5);

    let mut ps = ParamSet::new();
    let a = ps.add("a", random(&[2, 3, 4], &mut rng, -2.0, 2.0));
    let b = ps.add("b", random(&[2, 4, 5], &mut rng, -2.0, 2.0));
    let bt = ps.add("bt", random(&[2, 5, 4], &mut rng, -2.0, 2.0));
    let err = grad_check::<_, DiffError>(
        |t, p| {
            let x = t.param(p, a).bmm(t.param(p, b), false)?;
            let y = t.param(p, a).bmm(t.param(p, bt), true)?;
            Ok(project(t, x.add(y)?))
        },
        &ps,
        H,
    )
    .unwrap();
    assert!(err < 1e-5);
}

#[test]
fn sum_of_product_gradient_is_row_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::new();
    let a = ps.add("a", random(&[2, 3], &mut rng, -2.0, 2.0));
    let b = ps.add("b", random(&[3, 4], &mut rng, -2.0, 2.0));
    let tape = Tape::new();
    let loss = tape.param(&ps, a).matmul(tape.param(&ps, b)).unwrap().sum();
    tape.backward(loss, &mut ps).unwrap();
    let bv = ps.value(b).clone();
    for i in 0..2 {
        for k in 0..3 {
            let row_sum: f64 = bv.row(k).iter().sum();
            assert!((ps.grad(a)[i * 3 + k] - row_sum).abs() < 1e-12);
        }
    }
    let err = grad_check::<_, DiffError>(|t, p| Ok(t.param(p, a).matmul(t.param(p, b))?.sum()), &ps, H).unwrap();
    assert!(err < 1e-5);
}

#[test]
fn reduce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet::new();
    let x = ps.add("x", random(&[2, 3, 4], &mut rng, -2.0, 2.0));
    for kind in [Reduction::Sum, Reduction::Mean, Reduction::Max] {
        for axis in [None, Some(0), Some(1), Some(2)] {
            for keep in [false, true] {
                let err = grad_check::<_, DiffError>(|t, p| Ok(project(t, t.param(p, x).reduce(kind, axis, keep)?)), &ps, H).unwrap();
                assert!(err < 1e-5, "{kind:?} {axis:?}: {err}");
            }
        }
    }
}

#[test]
fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ps = ParamSet::new();
    let x = ps.add("x", random(&[2, 3, 4], &mut rng, -2.0, 2.0));
    let mask: Vec<bool> = (0..12).map(|i| i % 4 <= i / 4).collect();
    let err = grad_check::<_, DiffError>(|t, p| Ok(project(t, t.param(p, x).softmax_masked(&mask, &[3, 4])?)), &ps, H).unwrap();
    assert!(err < 1e-5);
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    let x = ps.add("x", random(&[2, 3, 4], &mut rng, -2.0, 2.0));
    let y = ps.add("y", random(&[2, 2, 4], &mut rng, -2.0, 2.0));
    let err = grad_check::<_, DiffError>(
        |t, p| {
            let xv = t.param(p, x);
            let a = xv.reshape(vec![6, 4])?.transpose()?;
            let b = xv.narrow(1, 1, 2)?;
            let c = concat(&[xv, t.param(p, y)], 1)?;
            let d = xv.gather_last(&[3, 0, 2, 1])?;
            let e = xv.transpose()?;
            project(t, a)
                .add(project(t, b))?
                .add(project(t, c))?
                .add(project(t, d))?
                .add(project(t, e))
        },
        &ps,
        H,
    )
    .unwrap();
    assert!(err < 1e-5);
}

#[test]
fn causal_conv_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamSet::new();
    let x = ps.add("x", random(&[2, 5, 3], &mut rng, -2.0, 2.0));
    let w = ps.add("w", random(&[3, 4], &mut rng, -2.0, 2.0));
    let b = ps.add("b", random(&[3], &mut rng, -2.0, 2.0));
    let err = grad_check::<_, DiffError>(
        |t, p| Ok(project(t, t.param(p, x).causal_conv(t.param(p, w), t.param(p, b))?)),
        &ps,
        H,
    )
    .unwrap();
    assert!(err < 1e-5);
}

#[test]
fn selective_scan_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParamSet::new();
    let x = ps.add("x", random(&[2, 5, 3], &mut rng, -2.0, 2.0));
    let d = ps.add("d", random(&[2, 5, 3], &mut rng, -2.0, 2.0));
    let a = ps.add("a", random(&[3, 4], &mut rng, -2.0, 2.0));
    let b = ps.add("b", random(&[2, 5, 4], &mut rng, -2.0, 2.0));
    let c = ps.add("c", random(&[2, 5, 4], &mut rng, -2.0, 2.0));
    let err = grad_check::<_, DiffError>(
        |t, p| {
            let delta = t.param(p, d).softplus();
            let a_neg = t.param(p, a).exp().neg();
            let y = selective_scan(t.param(p, x), delta, a_neg, t.param(p, b), t.param(p, c))?;
            Ok(project(t, y))
        },
        &ps,
        H,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn scan_gradient_near_zero_state_matrix() {
    // exercises the series branches of the hold factor and its derivative
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut ps = ParamSet::new();
    let x = ps.add("x", random(&[1, 4, 2], &mut rng, -2.0, 2.0));
    let d = ps.add("d", random(&[1, 4, 2], &mut rng, 0.1, 1.0));
    let a = ps.add("a", Tensor::new(vec![2, 2], vec![-1e-7, -5e-4, 2e-4, -0.3]).unwrap());
    let b = ps.add("b", random(&[1, 4, 2], &mut rng, -2.0, 2.0));
    let c = ps.add("c", random(&[1, 4, 2], &mut rng, -2.0, 2.0));
    let err = grad_check::<_, DiffError>(
        |t, p| {
            let y = selective_scan(t.param(p, x), t.param(p, d), t.param(p, a), t.param(p, b), t.param(p, c))?;
            Ok(project(t, y))
        },
        &ps,
        H,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn composite_mlp_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ps = ParamSet::new();
    let w1 = ps.add("w1", random(&[3, 6], &mut rng, -1.0, 1.0));
    let b1 = ps.add("b1", random(&[6], &mut rng, -1.0, 1.0));
    let w2 = ps.add("w2", random(&[6, 2], &mut rng, -1.0, 1.0));
    let xs = random(&[5, 3], &mut rng, -2.0, 2.0);
    let err = grad_check::<_, DiffError>(
        |t, p| {
            let h = t.constant(xs.clone()).matmul(t.param(p, w1))?.add(t.param(p, b1))?.tanh();
            let o = h.matmul(t.param(p, w2))?.silu();
            Ok(o.square().mean())
        },
        &ps,
        H,
    )
    .unwrap();
    assert!(err < 1e-5);
}

#[test]
fn elementwise_examples() {
    let t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
    assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    assert_eq!(t.constant(Tensor::vector(vec![0.0])).silu().item(), 0.0);
    let l = t.constant(Tensor::vector(vec![0.7])).exp().log().unwrap().item();
    assert!((l - 0.7).abs() < 1e-12);
    let bad = t.constant(Tensor::vector(vec![1.0, 0.0])).log();
    assert!(matches!(bad, Err(DiffError::Domain { op: "log", index: 1, .. })));
    let c = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    match a.add(c) {
        Err(DiffError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2]);
            assert_eq!(right, vec![3]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn matmul_examples() {
    let t = Tape::new();
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let out = t.constant(Tensor::eye(2)).matmul(t.constant(m.clone())).unwrap();
    assert_eq!(out.value(), m);
    let r = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let c = t.constant(Tensor::from_rows(&[vec![2.0], vec![5.0]]).unwrap());
    assert_eq!(r.matmul(c).unwrap().value().data(), &[2.0]);
    assert!(matches!(r.matmul(r), Err(DiffError::ShapeMismatch { .. })));
}

#[test]
fn reduce_examples() {
    let t = Tape::new();
    assert_eq!(t.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).sum().item(), 6.0);
    assert_eq!(t.constant(Tensor::vector(vec![2.0, 4.0])).mean().item(), 3.0);
    let mut ps = ParamSet::new();
    let x = ps.add("x", Tensor::vector(vec![5.0, 5.0, 1.0]));
    let loss = t.param(&ps, x).reduce(Reduction::Max, None, false).unwrap();
    t.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.grad(x), &[1.0, 0.0, 0.0]);
    let err = t.param(&ps, x).reduce(Reduction::Sum, Some(1), false);
    assert!(matches!(err, Err(DiffError::InvalidAxis { axis: 1, rank: 1 })));
}

#[test]
fn softmax_examples() {
    let t = Tape::new();
    let logits = t.constant(Tensor::from_rows(&[vec![10.0, 0.0]]).unwrap());
    let w = logits.softmax_masked(&[true, false], &[1, 2]).unwrap();
    assert_eq!(w.value().data(), &[1.0, 0.0]);
    let u = t.constant(Tensor::zeros(vec![2, 4])).softmax_masked(&[true; 8], &[2, 4]).unwrap();
    assert!(u.value().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let one = t.constant(Tensor::from_rows(&[vec![1.0, -3.0, 2.0]]).unwrap());
    let w = one.softmax_masked(&[false, true, false], &[1, 3]).unwrap();
    assert_eq!(w.value().data(), &[0.0, 1.0, 0.0]);
    let full = one.softmax_masked(&[false; 3], &[1, 3]);
    assert!(matches!(full, Err(DiffError::FullyMasked { row: 0 })));
}

#[test]
fn backward_examples() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::vector(vec![0.5, -1.0, 2.0]));
    let unused = ps.add("unused", Tensor::vector(vec![1.0]));
    let t = Tape::new();
    let loss = t.param(&ps, w).sum();
    t.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.grad(w), &[1.0, 1.0, 1.0]);
    assert_eq!(ps.grad(unused), &[0.0]);
    // accumulation without reset
    t.backward(loss, &mut ps).unwrap();
    assert_eq!(ps.grad(w), &[2.0, 2.0, 2.0]);

    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::vector(vec![2.0]));
    let t = Tape::new();
    let wv = t.param(&ps, w);
    t.backward(wv.mul(wv).unwrap().sum(), &mut ps).unwrap();
    assert_eq!(ps.grad(w), &[4.0]);

    let t = Tape::new();
    let v = t.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(t.backward(v, &mut ps), Err(DiffError::NonScalarLoss { .. })));
}

#[test]
fn fan_out_sums_contributions() {
    let t = Tape::new();
    let x = t.input(Tensor::scalar(3.0));
    let y = x.add(x).unwrap();
    let g = t.gradients(y).unwrap();
    assert_eq!(g.wrt(x).item(), 2.0);
}

#[test]
fn grad_check_examples() {
    let mut ps = ParamSet::new();
    let w = ps.add("w", Tensor::vector(vec![0.3, -1.2, 0.8]));
    let lin = grad_check::<_, DiffError>(|t, p| Ok(t.param(p, w).scale(2.5).sum()), &ps, H).unwrap();
    assert!(lin < 1e-10);
    let chain = grad_check::<_, DiffError>(|t, p| Ok(t.param(p, w).tanh().scale(1.3).tanh().sum()), &ps, H).unwrap();
    assert!(chain < 1e-5);
    let empty = ParamSet::new();
    let zero = grad_check::<_, DiffError>(|t, _| Ok(t.constant(Tensor::scalar(1.0))), &empty, H).unwrap();
    assert_eq!(zero, 0.0);
    assert!(matches!(
        grad_check::<_, DiffError>(|t, p| Ok(t.param(p, w).sum()), &ps, 0.1),
        Err(DiffError::InvalidStep { .. })
    ));
}

#[test]
fn scan_memoryless_and_hand_unrolled() {
    let t = Tape::new();
    // Ā = 0.5 via A = −1, Δ = ln 2; B chosen so B̄ = 1, C = 1
    let delta = t.constant(Tensor::full(vec![1, 3, 1], std::f64::consts::LN_2));
    let a = t.constant(Tensor::full(vec![1, 1], -1.0));
    let b = t.constant(Tensor::full(vec![1, 3, 1], 2.0));
    let c = t.constant(Tensor::full(vec![1, 3, 1], 1.0));
    let x = t.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 0.0, 0.0]).unwrap());
    let y = selective_scan(x, delta, a, b, c).unwrap().value();
    for (got, want) in y.data().iter().zip([1.0, 0.5, 0.25]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    let zero = t.constant(Tensor::zeros(vec![1, 3, 1]));
    assert!(selective_scan(zero, delta, a, b, c).unwrap().value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn tape_replay_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut ps = ParamSet::new();
        let w = ps.add("w", random(&[4, 4], &mut rng, -1.0, 1.0));
        let t = Tape::new();
        let wv = t.param(&ps, w);
        let loss = wv.matmul(wv).unwrap().tanh().softplus().mean();
        t.backward(loss, &mut ps).unwrap();
        (loss.item().to_bits(), ps.grad(w).iter().map(|g| g.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_chain_gradients(vals in proptest::collection::vec(-2.0f64..2.0, 6), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let x = ps.add("x", Tensor::new(vec![2, 3], vals).unwrap());
        let w = ps.add("w", random(&[3, 3], &mut rng, -2.0, 2.0));
        let err = grad_check::<_, DiffError>(
            |t, p| {
                let h = t.param(p, x).matmul(t.param(p, w))?.tanh();
                let s = h.softmax_masked(&[true; 3], &[3])?;
                Ok(project(t, s.mul(h.silu())?))
            },
            &ps,
            H,
        )
        .unwrap();
        prop_assert!(err < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12), maskbits in 1u16..4096) {
        let mut mask: Vec<bool> = (0..12).map(|i| maskbits & (1 << i) != 0).collect();
        for r in 0..3 {
            if !mask[r * 4..r * 4 + 4].iter().any(|&m| m) {
                mask[r * 4] = true;
            }
        }
        let t = Tape::new();
        let s = t.constant(Tensor::new(vec![3, 4], vals).unwrap()).softmax_masked(&mask, &[3, 4]).unwrap().value();
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if !mask[r * 4 + j] {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }
}
