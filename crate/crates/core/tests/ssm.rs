mod common;

use common::rand_tensor;
use proptest::prelude::*;
use ssmixer_core::gradcheck::grad_check;
use ssmixer_core::ssm::{
    build_lti_kernel, combine, discretize_zoh, lti_conv, scan_parallel, scan_sequential, Pair, ScanEngine, SsmCoeffs,
};
use ssmixer_core::{SplitMix64, Tape, Tensor};

/// Random selective instance: `x[L, E]`, `Δ > 0`, `A < 0`, `B`, `C`.
fn instance(rng: &mut SplitMix64, l: usize, e: usize, n: usize) -> (Tensor, SsmCoeffs) {
    let x = rand_tensor(rng, &[l, e], 1.0);
    let delta = Tensor::from_fn([l, e], |_| rng.uniform(1e-3, 0.5));
    let a = Tensor::from_fn([e, n], |_| -rng.uniform(0.1, 4.0));
    let b = rand_tensor(rng, &[l, n], 1.0);
    let c = rand_tensor(rng, &[l, n], 1.0);
    let coeffs = SsmCoeffs::selective(&x, &delta, &a, &b, &c).unwrap();
    (x, coeffs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parallel_matches_sequential(seed in any::<u64>(), l in 1usize..=600, e in 1usize..=8, n in 1usize..=8, skip in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let (x, coeffs) = instance(&mut rng, l, e, n);
        let d = skip.then(|| rand_tensor(&mut rng, &[e], 1.0));
        let s = scan_sequential(&coeffs, &x, d.as_ref()).unwrap();
        let p = scan_parallel(&coeffs, &x, d.as_ref()).unwrap();
        prop_assert!(s.max_abs_diff(&p).unwrap() <= 1e-10);
    }

    #[test]
    fn combine_is_associative(v in prop::array::uniform6(-2.0f64..2.0)) {
        let p = Pair { a: v[0], b: v[1] };
        let q = Pair { a: v[2], b: v[3] };
        let r = Pair { a: v[4], b: v[5] };
        let left = combine(combine(p, q), r);
        let right = combine(p, combine(q, r));
        prop_assert!((left.a - right.a).abs() <= 1e-12);
        prop_assert!((left.b - right.b).abs() <= 1e-12);
    }

    #[test]
    fn lti_convolution_matches_recurrence(seed in any::<u64>(), l in 1usize..=256, e in 1usize..=6, n in 1usize..=6) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_tensor(&mut rng, &[l, e], 1.0);
        let a = Tensor::from_fn([e, n], |_| -rng.uniform(0.1, 3.0));
        let dt = Tensor::from_fn([e], |_| rng.uniform(1e-2, 0.5));
        let bvec = rand_tensor(&mut rng, &[n], 1.0);
        let cvec = rand_tensor(&mut rng, &[n], 1.0);
        let delta = Tensor::from_fn([l, e], |i| dt.data()[i % e]);
        let b = Tensor::from_fn([l, n], |i| bvec.data()[i % n]);
        let c = Tensor::from_fn([l, n], |i| cvec.data()[i % n]);
        let coeffs = SsmCoeffs::selective(&x, &delta, &a, &b, &c).unwrap();
        let seq = scan_sequential(&coeffs, &x, None).unwrap();

        let abar = Tensor::from_fn([1, e, n], |i| (dt.data()[i / n] * a.data()[i]).exp());
        let bbar = Tensor::from_fn([1, e, n], |i| {
            discretize_zoh(a.data()[i], bvec.data()[i % n], dt.data()[i / n]).unwrap().1
        });
        let c1 = cvec.clone().reshape([1, n]).unwrap();
        let k = build_lti_kernel(&abar, &bbar, &c1, l).unwrap();
        let conv = lti_conv(&x, &k).unwrap();
        prop_assert!(seq.max_abs_diff(&conv).unwrap() <= 1e-8);
    }

    // |h_t| ≤ max|B̄x| / (1 − max Ā) for a stable system on bounded input.
    #[test]
    fn state_stays_bounded(seed in any::<u64>(), l in 1usize..=300) {
        let mut rng = SplitMix64::new(seed);
        let (x, coeffs) = instance(&mut rng, l, 3, 4);
        let amax = coeffs.abar.data().iter().cloned().fold(0.0, f64::max);
        let bmax = coeffs.bx.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let bound = bmax / (1.0 - amax);
        let h = ssmixer_core::ssm::linear_scan_sequential(coeffs.abar.data(), coeffs.bx.data(), 3 * 4, l);
        prop_assert!(h.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
        let _ = x;
    }
}

#[test]
fn long_sequences_match() {
    let mut rng = SplitMix64::new(99);
    for l in [1024, 4096] {
        let (x, coeffs) = instance(&mut rng, l, 4, 4);
        let s = scan_sequential(&coeffs, &x, None).unwrap();
        let p = scan_parallel(&coeffs, &x, None).unwrap();
        assert!(s.max_abs_diff(&p).unwrap() <= 1e-10);
    }
}

fn scan_grad_check(engine: ScanEngine, with_d: bool, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let (bt, l, e, n) = (2, 6, 3, 2);
    let u = rand_tensor(&mut rng, &[bt, l, e], 1.0);
    let delta_pre = rand_tensor(&mut rng, &[bt, l, e], 1.0);
    let a_log = rand_tensor(&mut rng, &[e, n], 0.5);
    let b = rand_tensor(&mut rng, &[bt, l, n], 1.0);
    let c = rand_tensor(&mut rng, &[bt, l, n], 1.0);
    let d = rand_tensor(&mut rng, &[e], 1.0);
    let probe = common::probe(&[bt, l, e], seed + 1);
    let mut inputs = vec![u, delta_pre, a_log, b, c];
    if with_d {
        inputs.push(d);
    }
    grad_check(
        |t, v| {
            let delta = t.softplus(v[1])?;
            let ea = t.exp(v[2])?;
            let a = t.neg(ea)?;
            let y = t.selective_scan(v[0], delta, a, v[3], v[4], v.get(5).copied(), engine)?;
            let w = t.constant(probe.clone());
            let p = t.mul(y, w)?;
            t.sum(p)
        },
        &inputs,
        1e-5,
    )
    .unwrap()
    .max_rel_err
}

#[test]
fn scan_gradients_match_finite_differences() {
    for engine in [ScanEngine::Sequential, ScanEngine::Parallel] {
        for with_d in [false, true] {
            let err = scan_grad_check(engine, with_d, 5);
            assert!(err <= 1e-5, "{engine:?} d={with_d}: {err}");
        }
    }
}

#[test]
fn scan_gradient_in_small_step_regime() {
    // Δ·A below the series threshold on some entries
    let mut t = Tape::new();
    let u = t.param(Tensor::new([3, 1], vec![0.3, -0.7, 1.1]).unwrap());
    let delta = t.param(Tensor::new([3, 1], vec![1e-10, 0.2, 1e-9]).unwrap());
    let a = t.param(Tensor::new([1, 1], vec![-1.0]).unwrap());
    let b = t.param(Tensor::new([3, 1], vec![0.5, 1.0, -2.0]).unwrap());
    let c = t.param(Tensor::new([3, 1], vec![1.0, 1.0, 1.0]).unwrap());
    let y = t.selective_scan(u, delta, a, b, c, None, ScanEngine::Parallel).unwrap();
    let l = t.sum(y).unwrap();
    t.backward(l).unwrap();
    assert!(t.grad(delta).unwrap().is_finite());
    assert!(t.grad(a).unwrap().is_finite());
}

#[test]
fn engines_agree_on_tape() {
    let mut rng = SplitMix64::new(8);
    let u = rand_tensor(&mut rng, &[2, 50, 3], 1.0);
    let delta = Tensor::from_fn([2, 50, 3], |_| rng.uniform(0.01, 0.3));
    let a = Tensor::from_fn([3, 4], |_| -rng.uniform(0.5, 2.0));
    let b = rand_tensor(&mut rng, &[2, 50, 4], 1.0);
    let c = rand_tensor(&mut rng, &[2, 50, 4], 1.0);
    let run = |engine| {
        let mut t = Tape::new();
        let vs: Vec<_> = [&u, &delta, &a, &b, &c].iter().map(|x| t.param((*x).clone())).collect();
        let y = t.selective_scan(vs[0], vs[1], vs[2], vs[3], vs[4], None, engine).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        (t.value(y).clone(), t.grad(vs[2]).unwrap().clone())
    };
    let (ys, gs) = run(ScanEngine::Sequential);
    let (yp, gp) = run(ScanEngine::Parallel);
    assert!(ys.max_abs_diff(&yp).unwrap() <= 1e-10);
    assert!(gs.max_abs_diff(&gp).unwrap() <= 1e-9);
}
