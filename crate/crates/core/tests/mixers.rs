mod common;

use common::{jitter, params_of, rand_tensor};
use proptest::prelude::*;
use ssmixer_core::gradcheck::{excite_ssm, grad_check};
use ssmixer_core::mixers::{ChannelMixer, Mixer, MixerOptions, MultiTokenMixer, TokenMixer};
use ssmixer_core::params::Bound;
use ssmixer_core::vim2::{cross_scan_paths, CrossScanMixer};
use ssmixer_core::{ParamStore, ScanPath, SplitMix64, Tape, Tensor, Var};

fn opts(state: usize) -> MixerOptions {
    MixerOptions { state, ..MixerOptions::default() }
}

/// Run `f` with all parameters frozen and return the output value.
fn eval(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Tape, &Bound, Var) -> Var) -> Tensor {
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let xv = t.constant(x.clone());
    let y = f(&mut t, &p, xv);
    t.value(y).clone()
}

fn token_mixer(seed: u64, d: usize, e: usize, n: usize) -> (ParamStore, TokenMixer) {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let m = TokenMixer::new(&mut store, &mut rng, "tm", d, e, &opts(n)).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    (store, m)
}

fn rows(x: &Tensor, r: usize) -> &[f64] {
    let d = *x.shape().last().unwrap();
    &x.data()[r * d..(r + 1) * d]
}

fn permute_rows(x: &Tensor, order: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for &src in order {
        out.extend_from_slice(rows(x, src));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mixers_preserve_shape(l in 1usize..=9, d in 1usize..=5, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_tensor(&mut rng, &[2, l, d], 1.0);
        let mut store = ParamStore::new();
        let tm = TokenMixer::new(&mut store, &mut rng, "tm", d, 2 * d, &opts(3)).unwrap();
        let cm = ChannelMixer::bidirectional(&mut store, &mut rng, "cm", l, 2 * d, &opts(3)).unwrap();
        let paths = vec![ScanPath::identity(l), ScanPath::identity(l).reversed()];
        let mixers = vec![
            TokenMixer::new(&mut store, &mut rng, "m0", d, 2 * d, &opts(3)).unwrap(),
            TokenMixer::new(&mut store, &mut rng, "m1", d, 2 * d, &opts(3)).unwrap(),
        ];
        let multi = MultiTokenMixer::new(paths.clone(), mixers).unwrap();
        let ps = ChannelMixer::per_scan(&mut store, &mut rng, "ps", &paths, 3, &opts(2)).unwrap();
        for y in [
            eval(&store, &x, |t, p, v| tm.forward(t, p, v).unwrap()),
            eval(&store, &x, |t, p, v| cm.forward(t, p, v).unwrap()),
            eval(&store, &x, |t, p, v| multi.forward(t, p, v).unwrap()),
            eval(&store, &x, |t, p, v| ps.forward(t, p, v).unwrap()),
        ] {
            prop_assert_eq!(y.shape(), x.shape());
            prop_assert!(y.is_finite());
        }
    }

    #[test]
    fn token_mixer_is_causal(l in 2usize..=24, seed in any::<u64>()) {
        let (store, m) = token_mixer(seed, 3, 6, 4);
        let mut rng = SplitMix64::new(seed ^ 0x55);
        let x = rand_tensor(&mut rng, &[l, 3], 1.0);
        let t0 = rng.below(l);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[t0 * 3..(t0 + 1) * 3] {
            *v += rng.uniform(-2.0, 2.0);
        }
        let y1 = eval(&store, &x, |t, p, v| m.forward(t, p, v).unwrap());
        let y2 = eval(&store, &x2, |t, p, v| m.forward(t, p, v).unwrap());
        for r in 0..t0 {
            for (a, b) in rows(&y1, r).iter().zip(rows(&y2, r)) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn multi_mixer_is_permutation_equivariant(l in 1usize..=10, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        let mut order: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut order);
        let p0 = ScanPath::new(order).unwrap();
        let paths = vec![p0.clone(), p0.reversed(), ScanPath::identity(l)];
        let mixers = (0..3)
            .map(|s| TokenMixer::new(&mut store, &mut rng, &format!("m{s}"), 2, 4, &opts(2)).unwrap())
            .collect();
        let multi = MultiTokenMixer::new(paths.clone(), mixers).unwrap();
        let x = rand_tensor(&mut rng, &[l, 2], 1.0);
        let mut pi: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut pi);
        let pi = ScanPath::new(pi).unwrap();
        let pi_inv = pi.inverse();
        let moved = MultiTokenMixer::new(
            paths.iter().map(|s| s.compose(&pi_inv)).collect(),
            multi.mixers.clone(),
        ).unwrap();
        let y = eval(&store, &x, |t, p, v| multi.forward(t, p, v).unwrap());
        let xp = permute_rows(&x, pi.indices());
        let yp = eval(&store, &xp, |t, p, v| moved.forward(t, p, v).unwrap());
        prop_assert!(yp.max_abs_diff(&permute_rows(&y, pi.indices())).unwrap() <= 1e-12);
    }
}

#[test]
fn zero_input_zero_output() {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(3);
    let m = TokenMixer::new(&mut store, &mut rng, "tm", 4, 8, &opts(4)).unwrap();
    let y = eval(&store, &Tensor::zeros([6, 4]), |t, p, v| m.forward(t, p, v).unwrap());
    assert_eq!(y.max_abs(), 0.0);
}

#[test]
fn batch_copies_are_independent() {
    let (store, m) = token_mixer(4, 3, 6, 2);
    let mut rng = SplitMix64::new(40);
    let x = rand_tensor(&mut rng, &[5, 3], 1.0);
    let mut both = x.data().to_vec();
    both.extend_from_slice(x.data());
    let xx = Tensor::new([2, 5, 3], both).unwrap();
    let y1 = eval(&store, &x, |t, p, v| m.forward(t, p, v).unwrap());
    let y2 = eval(&store, &xx, |t, p, v| m.forward(t, p, v).unwrap());
    assert_eq!(&y2.data()[..15], y1.data());
    assert_eq!(&y2.data()[15..], y1.data());
}

/// Identity convolution and a huge decay rate make every token independent.
fn make_memoryless(
    store: &mut ParamStore,
    conv: Option<&ssmixer_core::mixers::Conv>,
    ssm: &ssmixer_core::ssm::SsmParams,
) {
    if let Some(c) = conv {
        let k = store.get_mut(c.kernel);
        let w = k.shape()[1];
        for (i, v) in k.data_mut().iter_mut().enumerate() {
            *v = if i % w == 0 { 1.0 } else { 0.0 };
        }
        store.get_mut(c.bias).data_mut().fill(0.0);
    }
    store.get_mut(ssm.a_log).data_mut().fill(1e4f64.ln());
    store.get_mut(ssm.b_dt).data_mut().fill(30.0);
    store.get_mut(ssm.w_dt_up).data_mut().fill(0.0);
}

#[test]
fn memoryless_token_mixer_is_pointwise() {
    let (mut store, m) = token_mixer(5, 3, 6, 3);
    make_memoryless(&mut store, m.conv.as_ref(), m.ssm.as_ref().unwrap());
    let mut rng = SplitMix64::new(50);
    let x = rand_tensor(&mut rng, &[7, 3], 1.0);
    let order = [4, 0, 6, 2, 1, 5, 3];
    let y = eval(&store, &x, |t, p, v| m.forward(t, p, v).unwrap());
    let yp = eval(&store, &permute_rows(&x, &order), |t, p, v| m.forward(t, p, v).unwrap());
    assert!(yp.max_abs_diff(&permute_rows(&y, &order)).unwrap() <= 1e-14);
}

#[test]
fn single_path_multi_equals_uni() {
    let (store, m) = token_mixer(6, 3, 6, 2);
    let multi = MultiTokenMixer::new(vec![ScanPath::identity(5)], vec![m.clone()]).unwrap();
    let mut rng = SplitMix64::new(60);
    let x = rand_tensor(&mut rng, &[5, 3], 1.0);
    let a = eval(&store, &x, |t, p, v| m.forward(t, p, v).unwrap());
    let b = eval(&store, &x, |t, p, v| multi.forward(t, p, v).unwrap());
    assert_eq!(a, b);
}

#[test]
fn bidirectional_pair_mirror_symmetry() {
    let mut rng = SplitMix64::new(7);
    let mut store = ParamStore::new();
    let l = 6;
    let fwd = ScanPath::identity(l);
    let mixers: Vec<_> =
        (0..2).map(|s| TokenMixer::new(&mut store, &mut rng, &format!("m{s}"), 2, 4, &opts(2)).unwrap()).collect();
    let multi = MultiTokenMixer::new(vec![fwd.clone(), fwd.reversed()], mixers.clone()).unwrap();
    let rev = fwd.reversed();
    let mirrored = MultiTokenMixer::new(vec![fwd.compose(&rev), fwd.reversed().compose(&rev)], mixers).unwrap();
    let x = rand_tensor(&mut rng, &[l, 2], 1.0);
    let y = eval(&store, &x, |t, p, v| multi.forward(t, p, v).unwrap());
    let ym = eval(&store, &permute_rows(&x, rev.indices()), |t, p, v| mirrored.forward(t, p, v).unwrap());
    assert!(ym.max_abs_diff(&permute_rows(&y, rev.indices())).unwrap() <= 1e-12);
}

#[test]
fn zero_out_projections_silence_multi() {
    let mut rng = SplitMix64::new(8);
    let mut store = ParamStore::new();
    let mixers: Vec<_> =
        (0..2).map(|s| TokenMixer::new(&mut store, &mut rng, &format!("m{s}"), 3, 6, &opts(2)).unwrap()).collect();
    for m in &mixers {
        m.out_proj.zero(&mut store);
    }
    let multi = MultiTokenMixer::new(vec![ScanPath::identity(4), ScanPath::identity(4).reversed()], mixers).unwrap();
    let x = rand_tensor(&mut rng, &[4, 3], 2.0);
    assert_eq!(eval(&store, &x, |t, p, v| multi.forward(t, p, v).unwrap()).max_abs(), 0.0);
}

#[test]
fn path_count_mismatch() {
    let (_, m) = token_mixer(9, 2, 4, 2);
    assert!(MultiTokenMixer::new(vec![ScanPath::identity(3); 2], vec![m]).is_err());
}

fn channel_mixer(seed: u64, l: usize, hidden: usize) -> (ParamStore, ChannelMixer) {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let m = ChannelMixer::bidirectional(&mut store, &mut rng, "cm", l, hidden, &opts(3)).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    (store, m)
}

#[test]
fn zeroed_channel_sees_only_the_gate_path() {
    let (mut store, m) = channel_mixer(10, 4, 5);
    for b in &m.branches {
        make_memoryless(&mut store, b.conv.as_ref(), b.ssm.as_ref().unwrap());
        store.get_mut(b.in_proj.bias.unwrap()).data_mut().fill(0.0);
        if let Some(c) = &b.conv {
            store.get_mut(c.bias).data_mut().fill(0.0);
        }
    }
    let bias = store.get(m.out_proj.bias.unwrap()).clone();
    let mut rng = SplitMix64::new(11);
    for _ in 0..2 {
        let mut x = rand_tensor(&mut rng, &[4, 6], 1.0);
        for r in 0..4 {
            x.data_mut()[r * 6 + 2] = 0.0;
        }
        let y = eval(&store, &x, |t, p, v| m.forward(t, p, v).unwrap());
        let col: Vec<f64> = (0..4).map(|r| y.data()[r * 6 + 2]).collect();
        assert_eq!(col, bias.data());
    }
}

#[test]
fn tied_branches_agree_on_palindromes() {
    let (mut store, m) = channel_mixer(12, 3, 4);
    let (f, b) = (&m.branches[0], &m.branches[1]);
    let pairs = [
        (f.in_proj.weight, b.in_proj.weight),
        (f.in_proj.bias.unwrap(), b.in_proj.bias.unwrap()),
        (f.conv.unwrap().kernel, b.conv.unwrap().kernel),
        (f.conv.unwrap().bias, b.conv.unwrap().bias),
    ];
    for (src, dst) in pairs {
        let v = store.get(src).clone();
        *store.get_mut(dst) = v;
    }
    b.ssm.as_ref().unwrap().copy_from(&mut store, f.ssm.as_ref().unwrap());
    // same value in every channel of a token: the channel sequence is a palindrome
    let x = Tensor::from_fn([3, 5], |i| [0.3, -1.2, 0.8][i / 5]);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let xv = t.constant(x);
    let outs = m.branch_outputs(&mut t, &p, xv, true).unwrap();
    let fwd_flipped = t.flip(outs[0], -2).unwrap();
    assert_eq!(t.value(fwd_flipped), t.value(outs[1]));
}

#[test]
fn single_token_mixes_channels() {
    let (store, m) = channel_mixer(13, 1, 4);
    let mut identity = store.clone();
    for b in &m.branches {
        let c = b.conv.unwrap();
        let k = identity.get_mut(c.kernel);
        let w = k.shape()[1];
        for (i, v) in k.data_mut().iter_mut().enumerate() {
            *v = if i % w == 0 { 1.0 } else { 0.0 };
        }
    }
    let mut rng = SplitMix64::new(14);
    let x = rand_tensor(&mut rng, &[1, 6], 1.0);
    let a = eval(&store, &x, |t, p, v| m.forward(t, p, v).unwrap());
    let b = eval(&identity, &x, |t, p, v| m.forward(t, p, v).unwrap());
    assert!(a.max_abs_diff(&b).unwrap() > 1e-6);
}

#[test]
fn channel_mixing_is_not_causal() {
    let (store, m) = channel_mixer(15, 4, 5);
    let mut rng = SplitMix64::new(16);
    let x = rand_tensor(&mut rng, &[4, 6], 1.0);
    let mut x2 = x.clone();
    for r in 0..4 {
        x2.data_mut()[r * 6 + 5] += 1.0;
    }
    let y1 = eval(&store, &x, |t, p, v| m.forward(t, p, v).unwrap());
    let y2 = eval(&store, &x2, |t, p, v| m.forward(t, p, v).unwrap());
    let earliest_changed = (0..6).find(|&c| (0..4).any(|r| (y1.data()[r * 6 + c] - y2.data()[r * 6 + c]).abs() > 1e-9));
    assert_eq!(earliest_changed, Some(0));
}

fn check_mixer(store: &ParamStore, x: &Tensor, f: impl Fn(&mut Tape, &Bound, Var) -> Var, name: &str) {
    let mut store = store.clone();
    excite_ssm(&mut store);
    let probe = common::probe(x.shape(), 77);
    let r = grad_check(
        |t, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let xv = t.constant(x.clone());
            let y = f(t, &p, xv);
            let w = t.constant(probe.clone());
            let m = t.mul(y, w)?;
            t.sum(m)
        },
        &params_of(&store),
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err <= 1e-4, "{name}: {r:?}");
}

#[test]
fn gradient_checks_through_mixers() {
    let mut rng = SplitMix64::new(17);
    let x = rand_tensor(&mut rng, &[4, 3], 2.0);

    let (store, m) = token_mixer(18, 3, 4, 2);
    check_mixer(&store, &x, |t, p, v| m.forward(t, p, v).unwrap(), "token");

    let (store, m) = channel_mixer(19, 4, 4);
    check_mixer(&store, &x, |t, p, v| m.forward(t, p, v).unwrap(), "channel");

    let mut store = ParamStore::new();
    let paths = vec![ScanPath::new(vec![2, 0, 3, 1]).unwrap(), ScanPath::new(vec![1, 3, 0, 2]).unwrap()];
    let mixers =
        (0..2).map(|s| TokenMixer::new(&mut store, &mut rng, &format!("m{s}"), 3, 4, &opts(2)).unwrap()).collect();
    let multi = MultiTokenMixer::new(paths.clone(), mixers).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    check_mixer(&store, &x, |t, p, v| multi.forward(t, p, v).unwrap(), "multi");

    let mut store = ParamStore::new();
    let ps = ChannelMixer::per_scan(&mut store, &mut rng, "ps", &paths, 3, &opts(2)).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    check_mixer(&store, &x, |t, p, v| ps.forward(t, p, v).unwrap(), "per-scan channel");

    let mut store = ParamStore::new();
    let cs = CrossScanMixer::new(&mut store, &mut rng, "cs", (2, 3), 2, 4, &opts(2)).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    let img = rand_tensor(&mut rng, &[1, 2, 3, 2], 1.0);
    check_mixer(&store, &img, |t, p, v| cs.forward(t, p, v).unwrap(), "cross-scan");
}

#[test]
fn cross_scan_mixer_shapes() {
    let mut rng = SplitMix64::new(20);
    let mut store = ParamStore::new();
    let cs = CrossScanMixer::new(&mut store, &mut rng, "cs", (3, 4), 5, 10, &opts(2)).unwrap();
    assert_eq!(cs.paths, cross_scan_paths(3, 4).to_vec());
    let x = rand_tensor(&mut rng, &[2, 3, 4, 5], 1.0);
    let y = eval(&store, &x, |t, p, v| cs.forward(t, p, v).unwrap());
    assert_eq!(y.shape(), &[2, 3, 4, 5]);
    let bad = rand_tensor(&mut rng, &[2, 4, 3, 5], 1.0);
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let v = t.constant(bad);
    assert!(cs.forward(&mut t, &p, v).is_err());
}
