//! Structural and gradient invariants of the core modules, one function per
//! named check. Counts of violations are returned as `usize`; numeric gaps as `f64`.

use std::sync::Arc;

use ssmixer_core::block::MambaMixer;
use ssmixer_core::gradcheck::{excite_ssm, grad_check, COMPOSED_EPS};
use ssmixer_core::mixers::{ChannelMixer, Mixer, MixerOptions, MultiTokenMixer, TokenMixer};
use ssmixer_core::ssm::{linear_scan_sequential, ScanEngine, SsmCoeffs};
use ssmixer_core::tsm2::{SeriesBatch, Tsm2, Tsm2Config};
use ssmixer_core::vim2::{cross_scan_paths, CrossScanMixer, StageWiring, Vim2, Vim2Config};
use ssmixer_core::wiring::{coefficient_count, run_stack, AvgCoeffs, CoeffVars, InitMode};
use ssmixer_core::{Bound, ParamStore, ScanPath, SplitMix64, Tape, Tensor, Var};

use crate::error::Result;

const OP_EPS: f64 = 1e-5;

fn rand(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-scale, scale))
}

fn jitter(store: &mut ParamStore, rng: &mut SplitMix64, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.uniform(-scale, scale));
    }
}

fn params_of(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn probe_loss(t: &mut Tape, y: Var, seed: u64) -> ssmixer_core::Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let w = rand(&mut rng, t.shape(y), 1.0);
    let w = t.constant(w);
    let m = t.mul(y, w)?;
    t.sum(m)
}

fn opts(state: usize) -> MixerOptions {
    MixerOptions { state, ..MixerOptions::default() }
}

fn eval(
    store: &ParamStore,
    x: &Tensor,
    f: impl Fn(&mut Tape, &Bound, Var) -> ssmixer_core::Result<Var>,
) -> Result<Tensor> {
    let mut t = Tape::new();
    let p = store.bind_frozen(&mut t);
    let xv = t.constant(x.clone());
    let y = f(&mut t, &p, xv)?;
    Ok(t.value(y).clone())
}

fn permute_rows(x: &Tensor, order: &[usize]) -> Result<Tensor> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for &src in order {
        out.extend_from_slice(&x.data()[src * d..(src + 1) * d]);
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}

/// Worst relative gradient error over every differentiable tape op.
pub fn op_gradients(seed: u64) -> Result<f64> {
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> ssmixer_core::Result<Var>>;
    let mut rng = SplitMix64::new(seed);
    let a = rand(&mut rng, &[2, 3, 4], 1.5);
    let b = rand(&mut rng, &[3, 4], 1.5);
    let w = rand(&mut rng, &[4, 5], 1.0);
    let x = rand(&mut rng, &[2, 5, 3], 1.0);
    let z = rand(&mut rng, &[2, 5, 2], 1.0);
    let k = rand(&mut rng, &[3, 4], 1.0);
    let img = rand(&mut rng, &[2, 4, 5, 3], 1.0);
    let k2 = rand(&mut rng, &[3, 3, 3], 1.0);
    let n = rand(&mut rng, &[3, 4, 5], 2.0);
    let target = rand(&mut rng, &[3, 4], 1.0);
    let logits = rand(&mut rng, &[4, 3], 2.0);
    let path = ScanPath::new(vec![3, 0, 4, 1, 2])?;
    let idx = Arc::new(vec![0, 0, 7, 29, 3, 3, 3]);
    let unary = |f: fn(&mut Tape, Var) -> ssmixer_core::Result<Var>, s: u64| -> Op {
        Box::new(move |t, v| {
            let y = f(t, v[0])?;
            probe_loss(t, y, s)
        })
    };
    let p1 = path.clone();
    let p2 = path.clone();
    let cases: Vec<(Op, Vec<Tensor>)> = vec![
        (
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe_loss(t, y, 1)
            }),
            vec![a.clone(), w],
        ),
        (
            Box::new(|t, v| {
                let y = t.add(v[0], v[1])?;
                probe_loss(t, y, 2)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1])?;
                probe_loss(t, y, 3)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            Box::new(|t, v| {
                let y = t.sub(v[1], v[0])?;
                probe_loss(t, y, 4)
            }),
            vec![a.clone(), b.clone()],
        ),
        (
            Box::new(|t, v| {
                let y = t.scale(v[0], -2.5)?;
                probe_loss(t, y, 5)
            }),
            vec![a.clone()],
        ),
        (unary(|t, v| t.softplus(v), 6), vec![a.clone()]),
        (unary(|t, v| t.silu(v), 7), vec![a.clone()]),
        (unary(|t, v| t.sigmoid(v), 8), vec![a.clone()]),
        (unary(|t, v| t.exp(v), 9), vec![a.clone()]),
        (unary(|t, v| t.neg(v), 10), vec![a]),
        (
            Box::new(|t, v| {
                let y = t.weighted_sum(&[v[0], v[1]], &[v[2], v[3]])?;
                probe_loss(t, y, 11)
            }),
            vec![Tensor::scalar(0.7), Tensor::scalar(-1.3), b.clone(), b.map(|x| x * x)],
        ),
        (unary(|t, v| t.flip(v, 1), 12), vec![x.clone()]),
        (
            Box::new(move |t, v| {
                let y = t.gather_permute(v[0], &p1)?;
                probe_loss(t, y, 13)
            }),
            vec![x.clone()],
        ),
        (
            Box::new(move |t, v| {
                let y = t.scatter_permute(v[0], &p2)?;
                probe_loss(t, y, 14)
            }),
            vec![x.clone()],
        ),
        (unary(|t, v| t.transpose_last2(v), 15), vec![x.clone()]),
        (unary(|t, v| t.permute_axes(v, &[1, 0, 2]), 16), vec![x.clone()]),
        (unary(|t, v| t.mean_axis(v, 1), 17), vec![x.clone()]),
        (unary(|t, v| t.reshape(v, [10, 3]), 18), vec![x.clone()]),
        (
            Box::new(|t, v| {
                let y = t.concat_last(&[v[0], v[1]])?;
                probe_loss(t, y, 19)
            }),
            vec![x.clone(), z],
        ),
        (
            Box::new(move |t, v| {
                let y = t.gather(v[0], idx.clone(), vec![7])?;
                probe_loss(t, y, 20)
            }),
            vec![x.clone()],
        ),
        (
            Box::new(|t, v| {
                let y = t.conv1d_causal(v[0], v[1])?;
                probe_loss(t, y, 21)
            }),
            vec![x, k],
        ),
        (
            Box::new(|t, v| {
                let y = t.depthwise_conv2d(v[0], v[1])?;
                probe_loss(t, y, 22)
            }),
            vec![img, k2],
        ),
        (unary(|t, v| t.norm2d(v), 23), vec![n]),
        (Box::new(move |t, v| t.mse(v[0], &target)), vec![rand(&mut rng, &[3, 4], 1.0)]),
        (Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 2])), vec![logits]),
    ];
    let mut worst = 0.0f64;
    for (f, inputs) in &cases {
        worst = worst.max(grad_check(f, inputs, OP_EPS)?.max_rel_err);
    }
    Ok(worst)
}

/// Tensors where flipping twice or gathering then scattering does not
/// return the input bit for bit.
pub fn involution_failures(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let shape: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(5)).collect();
        let x = rand(&mut rng, &shape, 10.0);
        let axis = rng.below(shape.len()) as isize;
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let f = t.flip(v, axis)?;
        let ff = t.flip(f, axis)?;
        bad += usize::from(t.value(ff) != &x);

        let (rows, cols) = (1 + rng.below(6), 1 + rng.below(4));
        let x = rand(&mut rng, &[rows, cols], 3.0);
        let mut order: Vec<usize> = (0..rows).collect();
        rng.shuffle(&mut order);
        let path = ScanPath::new(order)?;
        let v = t.constant(x.clone());
        let g = t.gather_permute(v, &path)?;
        let back = t.scatter_permute(g, &path)?;
        bad += usize::from(t.value(back) != &x);
    }
    Ok(bad)
}

/// Worst (|mean|, |var − 1|) of norm2d outputs on inputs drawn from ±100.
pub fn norm2d_moments(trials: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = SplitMix64::new(seed);
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (m, n) = (2 + rng.below(5), 2 + rng.below(5));
        let x = Tensor::from_fn([m, n], |_| rng.uniform(-100.0, 100.0));
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.norm2d(v)?;
        let d = t.value(y).data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64;
        mean_err = mean_err.max(mean.abs());
        var_err = var_err.max((var - 1.0).abs());
    }
    Ok((mean_err, var_err))
}

/// Trials where a second backward pass over the same tape changes a gradient bit.
pub fn backward_repeat_mismatches(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let mut t = Tape::new();
        let xv = t.param(rand(&mut rng, &[3, 4], 2.0));
        let wv = t.param(rand(&mut rng, &[4, 2], 2.0));
        let y = t.matmul(xv, wv)?;
        let y = t.silu(y)?;
        let l = t.sum(y)?;
        t.backward(l)?;
        let g = (t.grad(xv).cloned(), t.grad(wv).cloned());
        t.backward(l)?;
        bad += usize::from(t.grad(xv).cloned() != g.0 || t.grad(wv).cloned() != g.1);
    }
    Ok(bad)
}

fn selective_instance(rng: &mut SplitMix64, l: usize, e: usize, n: usize) -> Result<SsmCoeffs> {
    let x = rand(rng, &[l, e], 1.0);
    let delta = Tensor::from_fn([l, e], |_| rng.uniform(1e-3, 0.5));
    let a = Tensor::from_fn([e, n], |_| -rng.uniform(0.1, 4.0));
    let b = rand(rng, &[l, n], 1.0);
    let c = rand(rng, &[l, n], 1.0);
    Ok(SsmCoeffs::selective(&x, &delta, &a, &b, &c)?)
}

/// Worst |h| / (max|B̄x| / (1 − max Ā)) over random selective scans.
pub fn state_bound_ratio(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let l = 1 + rng.below(300);
        let coeffs = selective_instance(&mut rng, l, 3, 4)?;
        let amax = coeffs.abar.data().iter().cloned().fold(0.0, f64::max);
        let bmax = coeffs.bx.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let bound = bmax / (1.0 - amax);
        let h = linear_scan_sequential(coeffs.abar.data(), coeffs.bx.data(), 12, l);
        if bound > 0.0 {
            worst = worst.max(h.iter().map(|v| v.abs()).fold(0.0, f64::max) / bound);
        }
    }
    Ok(worst)
}

/// Discretized decay factors outside the open unit interval.
pub fn decay_out_of_range(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let coeffs = selective_instance(&mut rng, 64, 4, 4)?;
        bad += coeffs.abar.data().iter().filter(|&&a| !(a > 0.0 && a < 1.0)).count();
    }
    Ok(bad)
}

/// Worst relative gradient error of the selective scan, both engines, with and without D.
pub fn scan_gradient(seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for engine in [ScanEngine::Sequential, ScanEngine::Parallel] {
        for with_d in [false, true] {
            let mut rng = SplitMix64::new(seed);
            let (bt, l, e, n) = (2, 6, 3, 2);
            let mut inputs = vec![
                rand(&mut rng, &[bt, l, e], 1.0),
                rand(&mut rng, &[bt, l, e], 1.0),
                rand(&mut rng, &[e, n], 0.5),
                rand(&mut rng, &[bt, l, n], 1.0),
                rand(&mut rng, &[bt, l, n], 1.0),
            ];
            if with_d {
                inputs.push(rand(&mut rng, &[e], 1.0));
            }
            let r = grad_check(
                |t, v| {
                    let delta = t.softplus(v[1])?;
                    let ea = t.exp(v[2])?;
                    let a = t.neg(ea)?;
                    let y = t.selective_scan(v[0], delta, a, v[3], v[4], v.get(5).copied(), engine)?;
                    probe_loss(t, y, seed + 1)
                },
                &inputs,
                OP_EPS,
            )?;
            worst = worst.max(r.max_rel_err);
        }
    }
    Ok(worst)
}

/// Mixer outputs whose shape differs from the input or that are not finite.
pub fn mixer_shape_failures(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let (l, d) = (1 + rng.below(9), 1 + rng.below(5));
        let x = rand(&mut rng, &[2, l, d], 1.0);
        let mut store = ParamStore::new();
        let tm = TokenMixer::new(&mut store, &mut rng, "tm", d, 2 * d, &opts(3))?;
        let cm = ChannelMixer::bidirectional(&mut store, &mut rng, "cm", l, 2 * d, &opts(3))?;
        let paths = vec![ScanPath::identity(l), ScanPath::identity(l).reversed()];
        let mixers = vec![
            TokenMixer::new(&mut store, &mut rng, "m0", d, 2 * d, &opts(3))?,
            TokenMixer::new(&mut store, &mut rng, "m1", d, 2 * d, &opts(3))?,
        ];
        let multi = MultiTokenMixer::new(paths.clone(), mixers)?;
        let ps = ChannelMixer::per_scan(&mut store, &mut rng, "ps", &paths, 3, &opts(2))?;
        let outs = [
            eval(&store, &x, |t, p, v| tm.forward(t, p, v))?,
            eval(&store, &x, |t, p, v| cm.forward(t, p, v))?,
            eval(&store, &x, |t, p, v| multi.forward(t, p, v))?,
            eval(&store, &x, |t, p, v| ps.forward(t, p, v))?,
        ];
        bad += outs.iter().filter(|y| y.shape() != x.shape() || !y.is_finite()).count();
    }
    Ok(bad)
}

/// Smallest change in channel 0 when only the last channel is perturbed.
/// Positive means the channel mixer is not causal along channels.
pub fn channel_mixer_reach(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    let (l, c) = (4, 6);
    let m = ChannelMixer::bidirectional(&mut store, &mut rng, "cm", l, 5, &opts(3))?;
    jitter(&mut store, &mut rng, 0.1);
    let x = rand(&mut rng, &[l, c], 1.0);
    let mut x2 = x.clone();
    for r in 0..l {
        x2.data_mut()[r * c + c - 1] += 1.0;
    }
    let y1 = eval(&store, &x, |t, p, v| m.forward(t, p, v))?;
    let y2 = eval(&store, &x2, |t, p, v| m.forward(t, p, v))?;
    Ok((0..l).map(|r| (y1.data()[r * c] - y2.data()[r * c]).abs()).fold(0.0, f64::max))
}

/// Max |M(πx) − πM(x)| for a multi-path mixer whose paths are composed with π⁻¹.
pub fn multi_path_equivariance(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let l = 1 + rng.below(10);
        let mut store = ParamStore::new();
        let mut order: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut order);
        let p0 = ScanPath::new(order)?;
        let paths = vec![p0.clone(), p0.reversed(), ScanPath::identity(l)];
        let mut mixers = Vec::new();
        for s in 0..3 {
            mixers.push(TokenMixer::new(&mut store, &mut rng, &format!("m{s}"), 2, 4, &opts(2))?);
        }
        let multi = MultiTokenMixer::new(paths.clone(), mixers)?;
        let x = rand(&mut rng, &[l, 2], 1.0);
        let mut pi: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut pi);
        let pi = ScanPath::new(pi)?;
        let pi_inv = pi.inverse();
        let moved = MultiTokenMixer::new(paths.iter().map(|s| s.compose(&pi_inv)).collect(), multi.mixers.clone())?;
        let y = eval(&store, &x, |t, p, v| multi.forward(t, p, v))?;
        let yp = eval(&store, &permute_rows(&x, pi.indices())?, |t, p, v| moved.forward(t, p, v))?;
        worst = worst.max(yp.max_abs_diff(&permute_rows(&y, pi.indices())?)?);
    }
    Ok(worst)
}

fn mixer_grad(
    store: &ParamStore,
    x: &Tensor,
    eps: f64,
    f: impl Fn(&mut Tape, &Bound, Var) -> ssmixer_core::Result<Var>,
) -> Result<f64> {
    let mut store = store.clone();
    excite_ssm(&mut store);
    let r = grad_check(
        |t, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let xv = t.constant(x.clone());
            let y = f(t, &p, xv)?;
            probe_loss(t, y, 77)
        },
        &params_of(&store),
        eps,
    )?;
    Ok(r.max_rel_err)
}

/// Worst relative gradient error over token, channel, multi-path, per-scan
/// channel and cross-scan mixers, all parameters. The cross-scan mixer is a
/// composed block and takes the composed step.
pub fn mixer_gradients(seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let x = rand(&mut rng, &[4, 3], 2.0);
    let mut worst = 0.0f64;

    let mut store = ParamStore::new();
    let tm = TokenMixer::new(&mut store, &mut rng, "tm", 3, 4, &opts(2))?;
    jitter(&mut store, &mut rng, 0.1);
    worst = worst.max(mixer_grad(&store, &x, OP_EPS, |t, p, v| tm.forward(t, p, v))?);

    let mut store = ParamStore::new();
    let cm = ChannelMixer::bidirectional(&mut store, &mut rng, "cm", 4, 4, &opts(3))?;
    jitter(&mut store, &mut rng, 0.1);
    worst = worst.max(mixer_grad(&store, &x, OP_EPS, |t, p, v| cm.forward(t, p, v))?);

    let mut store = ParamStore::new();
    let paths = vec![ScanPath::new(vec![2, 0, 3, 1])?, ScanPath::new(vec![1, 3, 0, 2])?];
    let mut mixers = Vec::new();
    for s in 0..2 {
        mixers.push(TokenMixer::new(&mut store, &mut rng, &format!("m{s}"), 3, 4, &opts(2))?);
    }
    let multi = MultiTokenMixer::new(paths.clone(), mixers)?;
    jitter(&mut store, &mut rng, 0.1);
    worst = worst.max(mixer_grad(&store, &x, OP_EPS, |t, p, v| multi.forward(t, p, v))?);

    let mut store = ParamStore::new();
    let ps = ChannelMixer::per_scan(&mut store, &mut rng, "ps", &paths, 3, &opts(2))?;
    jitter(&mut store, &mut rng, 0.1);
    worst = worst.max(mixer_grad(&store, &x, OP_EPS, |t, p, v| ps.forward(t, p, v))?);

    let mut store = ParamStore::new();
    let cs = CrossScanMixer::new(&mut store, &mut rng, "cs", (2, 3), 2, 4, &opts(2))?;
    jitter(&mut store, &mut rng, 0.1);
    let img = rand(&mut rng, &[1, 2, 3, 2], 1.0);
    worst = worst.max(mixer_grad(&store, &img, COMPOSED_EPS, |t, p, v| cs.forward(t, p, v))?);
    Ok(worst)
}

/// Max |chain-wired stack − plain composition| with pass-through channel mixers.
pub fn chain_composition_gap(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (layers, l) = (1 + rng.below(5), 1 + rng.below(12));
        let mut store = ParamStore::new();
        let mut ms = Vec::new();
        for i in 0..layers {
            ms.push(TokenMixer::new(&mut store, &mut rng, &format!("t{i}"), 3, 6, &opts(4))?);
        }
        jitter(&mut store, &mut rng, 0.1);
        let x = rand(&mut rng, &[l, 3], 1.0);
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let xv = t.constant(x);
        let c = CoeffVars::frozen(&mut t, &AvgCoeffs::init(layers, InitMode::Chain));
        let y = run_stack(&mut t, &c, xv, |t, i, v| ms[i - 1].forward(t, &p, v), |_, _, v| Ok(v))?;
        let mut z = xv;
        for m in &ms {
            z = m.forward(&mut t, &p, z)?;
        }
        worst = worst.max(t.value(y).max_abs_diff(t.value(z))?);
    }
    Ok(worst)
}

/// Wiring coefficients of a three-layer MambaMixer with an exactly zero gradient,
/// plus any shortfall against the closed-form count.
pub fn dead_coefficients(seed: u64) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let block = MambaMixer::new(&mut store, &mut rng, 3, 5, 3, 2, &opts(4), InitMode::Uniform)?;
    jitter(&mut store, &mut rng, 0.1);
    let x = rand(&mut rng, &[5, 3], 1.0);
    let mut t = Tape::new();
    let p = store.bind(&mut t);
    let xv = t.constant(x);
    let y = block.forward(&mut t, &p, xv)?;
    let loss = probe_loss(&mut t, y, 3)?;
    t.backward(loss)?;
    let c = block.wiring.values(&store);
    let mut dead = coefficient_count(3).abs_diff(c.count());
    for (k, l, i, _) in c.entries() {
        let g = t.grad(p[block.wiring.id(k, l, i)]).and_then(|g| g.item().ok()).unwrap_or(0.0);
        dead += usize::from(g == 0.0);
    }
    Ok(dead)
}

/// Wiring coefficients in the desk ViM2 that are unscoped, misnamed or miscounted per stage.
pub fn stage_scoping_errors(seed: u64) -> Result<usize> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let model = Vim2::new(Vim2Config::desk(), &mut store, &mut rng)?;
    let mut bad = 0;
    let mut seen = 0;
    for (s, stage) in model.stages.iter().enumerate() {
        let StageWiring::Learned(w) = &stage.wiring else {
            bad += 1;
            continue;
        };
        let prefix = format!("stage{}.avg.", s + 1);
        let count = store.iter().filter(|(n, _)| n.starts_with(&prefix)).count();
        bad += count.abs_diff(w.values(&store).count());
        bad += usize::from(w.layers() != stage.tokens.len());
        seen += count;
    }
    bad += store.iter().filter(|(n, _)| n.contains("avg.")).count().abs_diff(seen);
    Ok(bad)
}

/// Grid sizes where the cross-scan paths are not four permutations with
/// paths 2 and 4 the reversals of 1 and 3.
pub fn cross_scan_path_errors() -> Result<usize> {
    let mut bad = 0;
    for h in 1..=8 {
        for w in 1..=8 {
            let p = cross_scan_paths(h, w);
            let perms = p.iter().all(|s| {
                let mut seen = vec![false; h * w];
                s.indices().iter().all(|&i| i < h * w && !std::mem::replace(&mut seen[i], true))
                    && s.indices().len() == h * w
            });
            let row_major = p[0].indices().iter().copied().eq(0..h * w);
            let col_major = p[2].indices().iter().copied().eq((0..w).flat_map(|c| (0..h).map(move |r| r * w + c)));
            let reversed = p[1] == p[0].reversed() && p[3] == p[2].reversed();
            bad += usize::from(!(perms && row_major && col_major && reversed));
        }
    }
    Ok(bad)
}

/// Differences between the Tiny stage grid sizes and H/4, H/8, H/16, H/32.
pub fn tiny_grid_errors() -> usize {
    let c = Vim2Config::tiny();
    let want: Vec<usize> = [4, 8, 16, 32].iter().map(|d| c.image_size / d).collect();
    usize::from(c.grid_sizes() != want) + usize::from(want != [56, 28, 14, 7])
}

/// Max |logits(permuted head) − permuted logits| for a small ViM2.
pub fn head_permutation_gap(seed: u64) -> Result<f64> {
    let config = Vim2Config {
        stage_widths: vec![4, 8],
        token_depths: vec![1, 1],
        channel_depths: vec![1, 1],
        image_size: 16,
        num_classes: 4,
        ..Vim2Config::desk()
    };
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let model = Vim2::new(config, &mut store, &mut rng)?;
    jitter(&mut store, &mut rng, 0.05);
    let img = rand(&mut rng, &[2, 3, 16, 16], 1.0);
    let y = model.logits(&store, &img)?;
    let perm = [2, 0, 3, 1];
    let k = perm.len();
    let mut permuted = store.clone();
    let w = store.get(model.head.weight).clone();
    for r in 0..w.shape()[0] {
        for (j, &src) in perm.iter().enumerate() {
            permuted.get_mut(model.head.weight).data_mut()[r * k + j] = w.data()[r * k + src];
        }
    }
    if let Some(bias) = model.head.bias {
        let b = store.get(bias).clone();
        for (j, &src) in perm.iter().enumerate() {
            permuted.get_mut(bias).data_mut()[j] = b.data()[src];
        }
    }
    let yp = model.logits(&permuted, &img)?;
    let mut worst = 0.0f64;
    for bi in 0..2 {
        for (j, &src) in perm.iter().enumerate() {
            worst = worst.max((yp.data()[bi * k + j] - y.data()[bi * k + src]).abs());
        }
    }
    Ok(worst)
}

fn series_batch(c: &Tsm2Config, rng: &mut SplitMix64) -> SeriesBatch {
    SeriesBatch {
        x: rand(rng, &[1, c.variates, c.history], 1.0),
        s: (c.static_features > 0).then(|| rand(rng, &[1, c.variates, c.static_features], 1.0)),
        z: (c.future_features > 0).then(|| rand(rng, &[1, c.variates, c.future_len, c.future_features], 1.0)),
        target: None,
    }
}

/// Smallest, over (source, target) variate pairs, of the largest forecast change
/// at the target when the whole source history is shifted.
pub fn variate_reach(seed: u64) -> Result<f64> {
    let c = Tsm2Config { variates: 4, history: 16, horizon: 5, patch: 4, dim: 4, ..Tsm2Config::default() };
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let model = Tsm2::new(c.clone(), &mut store, &mut rng)?;
    jitter(&mut store, &mut rng, 0.05);
    let b = series_batch(&c, &mut rng);
    let y1 = model.predict(&store, &b)?;
    let mut least = f64::INFINITY;
    for src in 0..c.variates {
        let mut b2 = b.clone();
        for t in 0..c.history {
            b2.x.data_mut()[src * c.history + t] += 0.5;
        }
        let y2 = model.predict(&store, &b2)?;
        for m in 0..c.variates {
            let lo = m * c.horizon;
            let d = (lo..lo + c.horizon).map(|i| (y1.data()[i] - y2.data()[i]).abs()).fold(0.0, f64::max);
            least = least.min(d);
        }
    }
    Ok(least)
}

/// Worst relative gradient error of the TSM2 forecasting loss, all parameters.
pub fn tsm2_gradient(seed: u64) -> Result<f64> {
    let c = Tsm2Config {
        variates: 3,
        history: 8,
        horizon: 3,
        patch: 4,
        dim: 3,
        static_features: 2,
        future_len: 3,
        future_features: 2,
        mixer: opts(2),
        ..Tsm2Config::default()
    };
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let model = Tsm2::new(c.clone(), &mut store, &mut rng)?;
    jitter(&mut store, &mut rng, 0.05);
    excite_ssm(&mut store);
    let b = series_batch(&c, &mut rng);
    let target = rand(&mut rng, &[1, c.variates, c.horizon], 1.0);
    let r = grad_check(
        |t, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let y = model.forward_batch(t, &p, &b)?;
            t.mse(y, &target)
        },
        &params_of(&store),
        COMPOSED_EPS,
    )?;
    Ok(r.max_rel_err)
}
