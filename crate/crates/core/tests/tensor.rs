use pamr_core::tensor::{finite_diff_check, GradCheckConfig};
use pamr_core::{Error, ParamSet, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn group_norm_statistics() {
    let (c, l, groups) = (8, 6, 4);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[c, l], -10.0, 10.0, 1));
    let g = tape.constant(Tensor::full(&[c], 1.0));
    let b = tape.constant(Tensor::zeros(&[c]));
    let y = tape.group_norm(x, 0, groups, g, b, 1e-5).unwrap();
    let v = tape.value(y);
    let per = c / groups * l;
    for grp in 0..groups {
        let s = &v[grp * per..(grp + 1) * per];
        let mean = s.iter().sum::<f64>() / per as f64;
        let var = s.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / per as f64;
        assert!(mean.abs() < 1e-10, "group {grp} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "group {grp} var {var}");
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[7, 11], -30.0, 30.0, 2));
    let y = tape.softmax(x, 1).unwrap();
    for r in tape.value(y).chunks(11) {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn gelu_gradient_at_sample_points() {
    let mut params = ParamSet::new();
    let id = params.add("x", Tensor::new(&[4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap()).unwrap();
    let cfg = GradCheckConfig { tol: 1e-5, ..Default::default() };
    let report = finite_diff_check(
        |t, p| {
            let x = t.param(p, id);
            let y = t.gelu(x)?;
            t.sum(y)
        },
        &mut params,
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
    assert_eq!(report.checked(), 4);
}

#[test]
fn matmul_softmax_chain_gradient() {
    let mut params = ParamSet::new();
    let a = params.add("a", random(&[3, 4], -1.0, 1.0, 3)).unwrap();
    let b = params.add("b", random(&[4, 5], -1.0, 1.0, 4)).unwrap();
    let w = random(&[3, 5], -1.0, 1.0, 5);
    let cfg = GradCheckConfig { tol: 1e-6, ..Default::default() };
    let report = finite_diff_check(
        |t, p| {
            let (a, b) = (t.param(p, a), t.param(p, b));
            let m = t.matmul(a, b)?;
            let s = t.softmax(m, 1)?;
            let w = t.constant(w.clone());
            let y = t.mul(s, w)?;
            t.sum(y)
        },
        &mut params,
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err());
    assert_eq!(report.checked(), 32);
}

#[test]
fn quadratic_gradient_is_exact_enough() {
    let mut params = ParamSet::new();
    let id = params.add("x", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let report = finite_diff_check(
        |t, p| {
            let x = t.param(p, id);
            let y = t.mul(x, x)?;
            t.sum(y)
        },
        &mut params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-8);
}

#[test]
fn relu_kink_is_excluded() {
    let mut params = ParamSet::new();
    let id = params.add("x", Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap()).unwrap();
    let report = finite_diff_check(
        |t, p| {
            let x = t.param(p, id);
            let y = t.relu(x)?;
            t.sum(y)
        },
        &mut params,
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.params[0].excluded, 1);
    assert_eq!(report.params[0].checked, 2);
}

#[test]
fn nondeterministic_function_is_rejected() {
    let mut params = ParamSet::new();
    let id = params.add("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
    let calls = Cell::new(0.0);
    let err = finite_diff_check(
        |t, p| {
            calls.set(calls.get() + 1.0);
            let x = t.param(p, id);
            let s = t.sum(x)?;
            t.scale(s, calls.get())
        },
        &mut params,
        &GradCheckConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidCheck(_)));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::full(&[2, 2], 1.0).with_requires_grad(true));
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
}

#[test]
fn non_finite_construction_fails() {
    assert!(matches!(Tensor::new(&[2], vec![1.0, f64::NAN]), Err(Error::NonFinite(_))));
    assert!(Tensor::new(&[1], vec![f64::INFINITY]).is_err());
    assert!(matches!(Tensor::new(&[2, 2], vec![0.0; 3]), Err(Error::Dimension(_))));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut params = ParamSet::new();
    let a = params.add("a", random(&[3], -1.0, 1.0, 6)).unwrap();
    let b = params.add("b", random(&[3], -1.0, 1.0, 7)).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&params, a);
    let _ = tape.param(&params, b);
    let y = tape.mul(x, x).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = tape.param_grads(&grads, &params);
    assert!(g[1].iter().all(|&v| v == 0.0));
    assert!(g[0].iter().any(|&v| v != 0.0));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.constant(random(&[6, 9], -2.0, 2.0, 8));
        let b = tape.constant(random(&[9, 4], -2.0, 2.0, 9));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.softmax(m, 1).unwrap();
        let g = tape.gelu(s).unwrap();
        tape.value(g).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
