mod common;

use common::{jitter, params_of, probe, rand_tensor};
use proptest::prelude::*;
use ssmixer_core::gradcheck::{excite_ssm, grad_check, COMPOSED_EPS};
use ssmixer_core::tsm2::{persistence, SeriesBatch, Tsm2, Tsm2Config};
use ssmixer_core::{Bound, ParamStore, SplitMix64, Tape, Tensor};

fn build(config: Tsm2Config, seed: u64) -> (ParamStore, Tsm2) {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let model = Tsm2::new(config, &mut store, &mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.05);
    (store, model)
}

fn batch(c: &Tsm2Config, b: usize, seed: u64) -> SeriesBatch {
    let mut rng = SplitMix64::new(seed);
    SeriesBatch {
        x: rand_tensor(&mut rng, &[b, c.variates, c.history], 1.0),
        s: (c.static_features > 0).then(|| rand_tensor(&mut rng, &[b, c.variates, c.static_features], 1.0)),
        z: (c.future_features > 0)
            .then(|| rand_tensor(&mut rng, &[b, c.variates, c.future_len, c.future_features], 1.0)),
        target: None,
    }
}

fn small() -> Tsm2Config {
    Tsm2Config { variates: 3, history: 16, horizon: 5, patch: 4, dim: 4, ..Tsm2Config::default() }
}

#[test]
fn patch_counts() {
    let c = Tsm2Config { history: 8, patch: 4, ..small() };
    let (store, model) = build(c, 1);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let x = t.constant(Tensor::zeros([1, 3, 8]));
    let tok = model.patchify(&mut t, &p, x).unwrap();
    assert_eq!(t.shape(tok), &[1, 3, 2, 4]);

    let c = Tsm2Config { history: 8, patch: 1, ..small() };
    let (store, model) = build(c, 2);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let x = t.constant(Tensor::zeros([1, 3, 8]));
    let tok = model.patchify(&mut t, &p, x).unwrap();
    assert_eq!(t.shape(tok), &[1, 3, 8, 4]);
}

#[test]
fn constant_series_gives_identical_tokens() {
    let (mut store, model) = build(small(), 3);
    store.get_mut(model.embed.bias.unwrap()).data_mut().fill(0.0);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let x = t.constant(Tensor::full([1, 1, 12], 0.7));
    let tok = model.patchify(&mut t, &p, x).unwrap();
    let v = t.value(tok);
    assert_eq!(v.shape(), &[1, 1, 3, 4]);
    assert_eq!(&v.data()[..4], &v.data()[4..8]);
    assert_eq!(&v.data()[..4], &v.data()[8..]);
}

#[test]
fn uneven_history_is_left_padded() {
    let c = Tsm2Config { history: 10, patch: 4, ..small() };
    let (mut store, model) = build(c, 4);
    store.get_mut(model.embed.bias.unwrap()).data_mut().fill(0.0);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let x = t.constant(Tensor::from_fn([1, 1, 10], |i| i as f64 + 1.0));
    let tok = model.patchify(&mut t, &p, x).unwrap();
    let w = store.get(model.embed.weight);
    // first window is [0, 0, 1, 2]
    for o in 0..4 {
        let want = w.at(&[2, o]) + 2.0 * w.at(&[3, o]);
        assert!((t.value(tok).at(&[0, 0, 0, o]) - want).abs() < 1e-14);
    }
}

fn aux_config() -> Tsm2Config {
    Tsm2Config {
        variates: 7,
        history: 96,
        static_features: 3,
        future_len: 24,
        future_features: 2,
        ..Tsm2Config::default()
    }
}

#[test]
fn auxiliary_alignment_shapes() {
    let c = aux_config();
    let (store, model) = build(c.clone(), 5);
    let b = batch(&c, 1, 50);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let x = t.constant(b.x.clone());
    let s = t.constant(b.s.clone().unwrap());
    let z = t.constant(b.z.clone().unwrap());
    let a = model.align_auxiliary(&mut t, &p, x, Some(s), Some(z)).unwrap();
    assert_eq!(t.shape(a), &[1, 7, 288]);
    assert_eq!(&t.value(a).data()[..96], &b.x.data()[..96]);
    // a missing segment the config asks for is an error, and so is a variate mismatch
    assert!(model.align_auxiliary(&mut t, &p, x, Some(s), None).is_err());
    let s_bad = t.constant(Tensor::zeros([1, 6, 3]));
    assert!(model.align_auxiliary(&mut t, &p, x, Some(s_bad), Some(z)).is_err());

    let (store, model) = build(Tsm2Config { variates: 7, history: 96, ..Tsm2Config::default() }, 6);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let x = t.constant(b.x.clone());
    let a = model.align_auxiliary(&mut t, &p, x, None, None).unwrap();
    assert_eq!(t.value(a), &b.x);
}

#[test]
fn zero_future_covariates_give_zero_middle_segment() {
    let c = aux_config();
    let (mut store, model) = build(c.clone(), 7);
    let mixer = model.future_mixer.as_ref().unwrap();
    let mut biases =
        vec![mixer.mlp_proj.bias.unwrap(), mixer.out_proj.bias.unwrap(), model.future_proj.unwrap().bias.unwrap()];
    for b in &mixer.branches {
        biases.push(b.in_proj.bias.unwrap());
        biases.push(b.conv.unwrap().bias);
    }
    for id in biases {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut b = batch(&c, 2, 70);
    b.z = Some(Tensor::zeros([2, 7, 24, 2]));
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let x = t.constant(b.x.clone());
    let s = t.constant(b.s.clone().unwrap());
    let z = t.constant(b.z.clone().unwrap());
    let a = model.align_auxiliary(&mut t, &p, x, Some(s), Some(z)).unwrap();
    let a = t.value(a);
    for r in 0..14 {
        assert!(a.data()[r * 288 + 96..r * 288 + 192].iter().all(|&v| v == 0.0));
        assert!(a.data()[r * 288 + 192..(r + 1) * 288].iter().any(|&v| v != 0.0));
    }
}

#[test]
fn desk_forecast_shape() {
    let c = Tsm2Config::default();
    let (store, model) = build(c.clone(), 8);
    let y = model.predict(&store, &batch(&c, 2, 80)).unwrap();
    assert_eq!(y.shape(), &[2, 7, 24]);
    assert!(y.is_finite());
}

#[test]
fn single_variate() {
    let c = Tsm2Config { variates: 1, ..small() };
    let (store, model) = build(c.clone(), 9);
    let y = model.predict(&store, &batch(&c, 1, 90)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 5]);
    assert!(y.is_finite());
}

#[test]
fn identical_variates_with_tied_branches() {
    let c = Tsm2Config { variates: 2, ..small() };
    let (mut store, model) = build(c.clone(), 10);
    for block in &model.blocks {
        let (f, b) = (&block.variate.branches[0], &block.variate.branches[1]);
        let mut pairs = vec![(f.in_proj.weight, b.in_proj.weight), (f.in_proj.bias.unwrap(), b.in_proj.bias.unwrap())];
        pairs.push((f.conv.unwrap().kernel, b.conv.unwrap().kernel));
        pairs.push((f.conv.unwrap().bias, b.conv.unwrap().bias));
        for (src, dst) in pairs {
            let v = store.get(src).clone();
            *store.get_mut(dst) = v;
        }
        b.ssm.as_ref().unwrap().copy_from(&mut store, f.ssm.as_ref().unwrap());
    }
    let mut rng = SplitMix64::new(100);
    let row = rand_tensor(&mut rng, &[16], 1.0);
    let mut x = row.data().to_vec();
    x.extend_from_slice(row.data());
    let b = SeriesBatch { x: Tensor::new([1, 2, 16], x).unwrap(), s: None, z: None, target: None };
    let y = model.predict(&store, &b).unwrap();
    assert_eq!(&y.data()[..5], &y.data()[5..]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn time_mixing_is_causal(seed in any::<u64>(), t0 in 0usize..16) {
        let c = Tsm2Config { norm: false, history: 14, ..small() };
        let t0 = t0 % c.history;
        let (store, model) = build(c.clone(), seed);
        let b = batch(&c, 1, seed ^ 3);
        let mut x2 = b.x.clone();
        let mut rng = SplitMix64::new(seed ^ 4);
        for m in 0..c.variates {
            x2.data_mut()[m * c.history + t0] += rng.uniform(0.5, 2.0);
        }
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let p = store.bind_frozen(&mut t);
            let xv = t.constant(x.clone());
            let (_, trace) = model.forward_traced(&mut t, &p, xv, None, None).unwrap();
            trace.time_outputs.iter().map(|&v| t.value(v).clone()).collect::<Vec<_>>()
        };
        let (a, bb) = (run(&b.x), run(&x2));
        let first = c.token_of(t0);
        for (ya, yb) in a.iter().zip(&bb) {
            let (n, d) = (ya.shape()[2], ya.shape()[3]);
            for m in 0..c.variates {
                for tok in 0..first {
                    for k in 0..d {
                        let i = (m * n + tok) * d + k;
                        prop_assert!((ya.data()[i] - yb.data()[i]).abs() <= 1e-14);
                    }
                }
            }
        }
    }
}

// Joint normalization over a variate's tokens is the only path back in time.
#[test]
fn norm2d_is_what_breaks_causality() {
    let c = Tsm2Config { history: 16, ..small() };
    let t0 = 13;
    let leak = |norm: bool| {
        let c = Tsm2Config { norm, ..c.clone() };
        let (store, model) = build(c.clone(), 40);
        let b = batch(&c, 1, 41);
        let mut x2 = b.x.clone();
        x2.data_mut()[t0] += 1.5;
        let run = |x: &Tensor| {
            let mut t = Tape::new();
            let p = store.bind_frozen(&mut t);
            let xv = t.constant(x.clone());
            let (_, trace) = model.forward_traced(&mut t, &p, xv, None, None).unwrap();
            t.value(trace.time_outputs[0]).clone()
        };
        let (ya, yb) = (run(&b.x), run(&x2));
        let d = ya.shape()[3];
        let early = c.token_of(t0) * d;
        ya.data()[..early].iter().zip(&yb.data()[..early]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    assert!(leak(false) <= 1e-14);
    assert!(leak(true) > 1e-6);
}

#[test]
fn variate_mixing_reaches_every_variate() {
    let c = Tsm2Config { variates: 4, ..small() };
    let (store, model) = build(c.clone(), 11);
    for target in [0, 3] {
        let b = batch(&c, 1, 110);
        let mut b2 = b.clone();
        for t in 0..c.history {
            b2.x.data_mut()[target * c.history + t] += 0.5;
        }
        let (y1, y2) = (model.predict(&store, &b).unwrap(), model.predict(&store, &b2).unwrap());
        for m in 0..4 {
            let changed = (0..5).any(|h| (y1.data()[m * 5 + h] - y2.data()[m * 5 + h]).abs() > 1e-9);
            assert!(changed, "variate {m} ignores variate {target}");
        }
    }
}

#[test]
fn instance_norm_shifts_forecasts_with_level() {
    let c = Tsm2Config { instance_norm: true, ..small() };
    let (store, model) = build(c.clone(), 12);
    let b = batch(&c, 1, 120);
    let mut shifted = b.clone();
    shifted.x = b.x.map(|v| v + 3.0);
    let y1 = model.predict(&store, &b).unwrap();
    let y2 = model.predict(&store, &shifted).unwrap();
    assert!(y2.max_abs_diff(&y1.map(|v| v + 3.0)).unwrap() < 1e-12);
}

#[test]
fn full_loss_gradient_check() {
    let c = Tsm2Config {
        variates: 3,
        history: 8,
        horizon: 3,
        patch: 4,
        dim: 3,
        static_features: 2,
        future_len: 3,
        future_features: 2,
        mixer: ssmixer_core::mixers::MixerOptions { state: 2, ..Default::default() },
        ..Tsm2Config::default()
    };
    let (mut store, model) = build(c.clone(), 13);
    excite_ssm(&mut store);
    let b = batch(&c, 1, 130);
    let target = probe(&[1, 3, 3], 131);
    let r = grad_check(
        |t, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let y = model.forward_batch(t, &p, &b)?;
            t.mse(y, &target)
        },
        &params_of(&store),
        COMPOSED_EPS,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn persistence_repeats_last_value() {
    let x = Tensor::new([1, 2, 3], vec![1.0, 2.0, 3.0, -1.0, -2.0, -4.0]).unwrap();
    let y = persistence(&x, 2).unwrap();
    assert_eq!(y.data(), &[3.0, 3.0, -4.0, -4.0]);
    assert!(persistence(&Tensor::zeros([3]), 2).is_err());
}

#[test]
fn invalid_configs() {
    assert!(Tsm2Config { history: 4, patch: 8, ..small() }.validate().is_err());
    assert!(Tsm2Config { future_features: 2, future_len: 0, ..small() }.validate().is_err());
    assert!(Tsm2Config { layers: 0, ..small() }.validate().is_err());
}
