//! Named numerical checks, grouped into suites, with a CSV report.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Serialize;
use ssmixer_core::block::MambaMixer;
use ssmixer_core::gradcheck::{excite_ssm, grad_check, COMPOSED_EPS};
use ssmixer_core::mixers::{Mixer, MixerOptions, TokenMixer};
use ssmixer_core::ssm::{
    build_lti_kernel, combine, discretize_zoh, linear_scan_parallel_with, lti_conv, scan_sequential, Pair, SsmCoeffs,
};
use ssmixer_core::tsm2::{Tsm2, Tsm2Config};
use ssmixer_core::vim2::{param_count, reference, Reduction, Vim2, Vim2Config};
use ssmixer_core::wiring::{coefficient_count, AvgCoeffs, InitMode, Wiring};
use ssmixer_core::{Bound, ParamStore, SplitMix64, Tape, Tensor};

use crate::error::{HarnessError, Result};

mod invariants;
pub use invariants::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Scan,
    Grad,
    Reduce,
    Count,
    Causal,
    Props,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Scan, Suite::Grad, Suite::Reduce, Suite::Count, Suite::Causal, Suite::Props];

    fn name(self) -> &'static str {
        match self {
            Suite::Scan => "scan",
            Suite::Grad => "grad",
            Suite::Reduce => "reduce",
            Suite::Count => "count",
            Suite::Causal => "causal",
            Suite::Props => "props",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A suite name or `all`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection(pub Option<Suite>);

impl FromStr for Selection {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Selection(None));
        }
        Suite::ALL.into_iter().find(|x| x.name() == s).map(|x| Selection(Some(x))).ok_or_else(|| {
            HarnessError::Invalid(format!("unknown suite {s:?}; expected scan|grad|reduce|count|causal|props|all"))
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub check: &'static str,
    pub suite: Suite,
    pub measured: f64,
    pub tolerance: String,
    pub status: &'static str,
}

impl CheckResult {
    fn at_most(check: &'static str, suite: Suite, measured: f64, tol: f64) -> Self {
        let ok = measured <= tol;
        CheckResult { check, suite, measured, tolerance: format!("<= {tol:e}"), status: status(ok) }
    }

    fn at_least(check: &'static str, suite: Suite, measured: f64, tol: f64) -> Self {
        let ok = measured >= tol;
        CheckResult { check, suite, measured, tolerance: format!(">= {tol:e}"), status: status(ok) }
    }

    fn none(check: &'static str, suite: Suite, violations: usize) -> Self {
        CheckResult::at_most(check, suite, violations as f64, 0.0)
    }

    pub fn passed(&self) -> bool {
        self.status == "PASS"
    }
}

fn status(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn rand(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-scale, scale))
}

/// Max |parallel − sequential| over random selective instances, with the
/// parallel engine built on `op`.
pub fn scan_equivalence<F>(instances: usize, seed: u64, op: F) -> Result<f64>
where
    F: Fn(Pair, Pair) -> Pair + Copy,
{
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let l = [16, 256, 4096][i % 3];
        let (e, n) = (1 + rng.below(8), 1 + rng.below(8));
        let x = rand(&mut rng, &[l, e], 1.0);
        let delta = Tensor::from_fn([l, e], |_| rng.uniform(1e-3, 0.5));
        let a = Tensor::from_fn([e, n], |_| -rng.uniform(0.05, 4.0));
        let b = rand(&mut rng, &[l, n], 1.0);
        let c = rand(&mut rng, &[l, n], 1.0);
        let coeffs = SsmCoeffs::selective(&x, &delta, &a, &b, &c)?;
        let seq = scan_sequential(&coeffs, &x, None)?;
        let h = linear_scan_parallel_with(coeffs.abar.data(), coeffs.bx.data(), e * n, l, op);
        for t in 0..l {
            for ch in 0..e {
                let y: f64 = (0..n).map(|s| h[(t * e + ch) * n + s] * c.data()[t * n + s]).sum();
                worst = worst.max((y - seq.data()[t * e + ch]).abs());
            }
        }
    }
    Ok(worst)
}

/// Max |kernel convolution − recurrence| over random time-invariant instances.
pub fn lti_equivalence(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let l = [16, 64, 256][i % 3];
        let (e, n) = (1 + rng.below(8), 1 + rng.below(8));
        let x = rand(&mut rng, &[l, e], 1.0);
        let a = Tensor::from_fn([e, n], |_| -rng.uniform(0.05, 3.0));
        let dt = Tensor::from_fn([e], |_| rng.uniform(1e-2, 0.5));
        let bv = rand(&mut rng, &[n], 1.0);
        let cv = rand(&mut rng, &[n], 1.0);
        let delta = Tensor::from_fn([l, e], |j| dt.data()[j % e]);
        let b = Tensor::from_fn([l, n], |j| bv.data()[j % n]);
        let c = Tensor::from_fn([l, n], |j| cv.data()[j % n]);
        let seq = scan_sequential(&SsmCoeffs::selective(&x, &delta, &a, &b, &c)?, &x, None)?;
        let abar = Tensor::from_fn([1, e, n], |j| (dt.data()[j / n] * a.data()[j]).exp());
        let mut bbar = Vec::with_capacity(e * n);
        for j in 0..e * n {
            bbar.push(discretize_zoh(a.data()[j], bv.data()[j % n], dt.data()[j / n])?.1);
        }
        let bbar = Tensor::new([1, e, n], bbar)?;
        let k = build_lti_kernel(&abar, &bbar, &cv.clone().reshape([1, n])?, l)?;
        worst = worst.max(lti_conv(&x, &k)?.max_abs_diff(&seq)?);
    }
    Ok(worst)
}

/// Worst relative gradient error through a two-layer MambaMixer, all parameters.
pub fn block_gradient(seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);
    let opts = MixerOptions { state: 3, ..MixerOptions::default() };
    let block = MambaMixer::new(&mut store, &mut rng, 2, 4, 3, 2, &opts, InitMode::Uniform)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.1, 0.1));
    }
    excite_ssm(&mut store);
    let x = rand(&mut rng, &[4, 3], 2.0);
    let w = rand(&mut rng, &[4, 3], 1.0);
    let params: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let report = grad_check(
        |t, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let xv = t.constant(x.clone());
            let y = block.forward(t, &p, xv)?;
            let wv = t.constant(w.clone());
            let m = t.mul(y, wv)?;
            t.sum(m)
        },
        &params,
        COMPOSED_EPS,
    )?;
    Ok(report.max_rel_err)
}

fn reduction_config(reduction: Reduction) -> Vim2Config {
    Vim2Config {
        stage_widths: vec![6, 12],
        token_depths: vec![2, 2],
        channel_depths: vec![1, 2],
        image_size: 16,
        num_classes: 4,
        reduction,
        wiring_init: InitMode::Uniform,
        ..Vim2Config::desk()
    }
}

/// Max |model − reference| logits for a reduced ViM2 on random images.
pub fn reduction_gap(reduction: Reduction, trials: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..trials as u64 {
        let mut rng = SplitMix64::new(seed.wrapping_add(i));
        let mut store = ParamStore::new();
        let model = Vim2::new(reduction_config(reduction), &mut store, &mut rng)?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.05, 0.05));
        }
        let img = rand(&mut rng, &[2, 3, 16, 16], 1.0);
        let y = model.logits(&store, &img)?;
        let r = match reduction {
            Reduction::MlpMixer => reference::mlp_mixer(&model, &store, &img)?,
            Reduction::Vmamba => reference::vmamba(&model, &store, &img)?,
            Reduction::None => return Err(HarnessError::Invalid("no reference for the unreduced model".into())),
        };
        worst = worst.max(y.max_abs_diff(&r)?);
    }
    Ok(worst)
}

/// Layer counts in `1..=max` whose enumerated coefficients disagree with `𝓛(2𝓛+3)`.
pub fn coefficient_mismatches(max: usize) -> Result<usize> {
    let mut bad = 0;
    for layers in 1..=max {
        let mut store = ParamStore::new();
        Wiring::new(&mut store, "", &AvgCoeffs::init(layers, InitMode::Uniform))?;
        let closed = layers * (2 * layers + 3);
        bad += usize::from(store.num_scalars() != closed || coefficient_count(layers) != closed);
    }
    Ok(bad)
}

/// Max change in time-mixer outputs at tokens before a perturbed timestep.
pub fn time_mixer_leak(probes: usize, seed: u64) -> Result<f64> {
    let c = Tsm2Config { norm: false, ..Tsm2Config::default() };
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    let model = Tsm2::new(c.clone(), &mut store, &mut rng)?;
    let run = |x: &Tensor| -> Result<Vec<Tensor>> {
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let xv = t.constant(x.clone());
        let (_, trace) = model.forward_traced(&mut t, &p, xv, None, None)?;
        Ok(trace.time_outputs.iter().map(|&v| t.value(v).clone()).collect())
    };
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x = rand(&mut rng, &[1, c.variates, c.history], 1.0);
        let t0 = c.patch + rng.below(c.history - c.patch);
        let mut x2 = x.clone();
        for m in 0..c.variates {
            x2.data_mut()[m * c.history + t0] += rng.uniform(0.5, 2.0);
        }
        let first = c.token_of(t0);
        for (ya, yb) in run(&x)?.iter().zip(&run(&x2)?) {
            let (n, d) = (ya.shape()[2], ya.shape()[3]);
            for m in 0..c.variates {
                let lo = m * n * d;
                let hi = lo + first * d;
                for (a, b) in ya.data()[lo..hi].iter().zip(&yb.data()[lo..hi]) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Same as [`time_mixer_leak`] for a bare token mixer on `[L, D]` input.
pub fn token_mixer_leak(probes: usize, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    let opts = MixerOptions { state: 4, ..MixerOptions::default() };
    let (l, d) = (64, 4);
    let mixer = TokenMixer::new(&mut store, &mut rng, "tm", d, 2 * d, &opts)?;
    let run = |x: &Tensor| -> Result<Tensor> {
        let mut t = Tape::new();
        let p = store.bind_frozen(&mut t);
        let xv = t.constant(x.clone());
        let y = mixer.forward(&mut t, &p, xv)?;
        Ok(t.value(y).clone())
    };
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let x = rand(&mut rng, &[l, d], 1.0);
        let t0 = 1 + rng.below(l - 1);
        let mut x2 = x.clone();
        x2.data_mut()[t0 * d..(t0 + 1) * d].iter_mut().for_each(|v| *v += 1.0);
        let (ya, yb) = (run(&x)?, run(&x2)?);
        for (a, b) in ya.data()[..t0 * d].iter().zip(&yb.data()[..t0 * d]) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

pub const TINY_RANGE: (usize, usize) = (16_000_000, 24_000_000);

/// Run every check in `selection` with the parallel scan built on `op`.
pub fn run_with<F>(selection: Selection, op: F) -> Result<Vec<CheckResult>>
where
    F: Fn(Pair, Pair) -> Pair + Copy,
{
    let want = |s: Suite| selection.0.is_none_or(|x| x == s);
    let mut out = Vec::new();
    if want(Suite::Scan) {
        let s = Suite::Scan;
        out.push(CheckResult::at_most("scan_parallel_vs_sequential", s, scan_equivalence(100, 1, op)?, 1e-10));
        out.push(CheckResult::at_most("lti_convolution_vs_recurrence", s, lti_equivalence(100, 2)?, 1e-8));
        out.push(CheckResult::at_most("scan_state_bound_ratio", s, state_bound_ratio(50, 7)?, 1.0 + 1e-12));
        out.push(CheckResult::none("scan_decay_in_unit_interval", s, decay_out_of_range(50, 8)?));
    }
    if want(Suite::Grad) {
        let s = Suite::Grad;
        out.push(CheckResult::at_most("tape_op_gradients", s, op_gradients(11)?, 1e-6));
        out.push(CheckResult::at_most("selective_scan_gradient", s, scan_gradient(5)?, 1e-5));
        out.push(CheckResult::at_most("mixer_gradients", s, mixer_gradients(17)?, 1e-4));
        out.push(CheckResult::at_most("mamba_mixer_block_gradient", s, block_gradient(22)?, 1e-4));
        out.push(CheckResult::none("wiring_coefficients_receive_gradient", s, dead_coefficients(21)?));
        out.push(CheckResult::at_most("tsm2_loss_gradient", s, tsm2_gradient(13)?, 1e-4));
    }
    if want(Suite::Reduce) {
        let s = Suite::Reduce;
        out.push(CheckResult::at_most("chain_wiring_is_composition", s, chain_composition_gap(12, 9)?, 1e-12));
        out.push(CheckResult::at_most("mlp_mixer_reduction", s, reduction_gap(Reduction::MlpMixer, 4, 3)?, 1e-12));
        out.push(CheckResult::at_most("vmamba_reduction", s, reduction_gap(Reduction::Vmamba, 4, 4)?, 1e-12));
    }
    if want(Suite::Count) {
        let s = Suite::Count;
        out.push(CheckResult::none("coefficient_count_mismatches", s, coefficient_mismatches(50)?));
        let n = param_count(&Vim2Config::tiny())?;
        let (lo, hi) = TINY_RANGE;
        out.push(CheckResult {
            check: "vim2_tiny_parameters",
            suite: s,
            measured: n as f64,
            tolerance: format!("[{lo}, {hi}]"),
            status: status((lo..=hi).contains(&n)),
        });
        out.push(CheckResult::none("vim2_tiny_stage_grids", s, tiny_grid_errors()));
        out.push(CheckResult::none("wiring_stage_scoping", s, stage_scoping_errors(10)?));
    }
    if want(Suite::Causal) {
        let s = Suite::Causal;
        out.push(CheckResult::at_most("time_mixer_causality", s, time_mixer_leak(20, 5)?, 1e-14));
        out.push(CheckResult::at_most("token_mixer_causality", s, token_mixer_leak(20, 6)?, 1e-14));
        out.push(CheckResult::at_least("channel_mixer_sees_all_channels", s, channel_mixer_reach(15)?, 1e-9));
        out.push(CheckResult::at_least("variate_mixer_reaches_every_variate", s, variate_reach(11)?, 1e-9));
    }
    if want(Suite::Props) {
        let s = Suite::Props;
        out.push(CheckResult::none("flip_and_permute_involutions", s, involution_failures(64, 12)?));
        let (mean, var) = norm2d_moments(64, 13)?;
        out.push(CheckResult::at_most("norm2d_zero_mean", s, mean, 1e-12));
        out.push(CheckResult::at_most("norm2d_unit_variance", s, var, 1e-6));
        out.push(CheckResult::none("backward_repeat_bitwise", s, backward_repeat_mismatches(32, 14)?));
        out.push(CheckResult::none("mixer_shape_preservation", s, mixer_shape_failures(16, 15)?));
        out.push(CheckResult::at_most(
            "multi_path_permutation_equivariance",
            s,
            multi_path_equivariance(16, 16)?,
            1e-12,
        ));
        out.push(CheckResult::none("cross_scan_paths", s, cross_scan_path_errors()?));
        out.push(CheckResult::at_most("head_permutation_covariance", s, head_permutation_gap(9)?, 0.0));
    }
    Ok(out)
}

pub fn run(selection: Selection) -> Result<Vec<CheckResult>> {
    run_with(selection, combine)
}

pub fn write_report<W: Write>(w: W, results: &[CheckResult]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for r in results {
        csv.serialize(r).map_err(|e| HarnessError::Invalid(format!("writing report: {e}")))?;
    }
    csv.flush().map_err(|e| HarnessError::Invalid(format!("writing report: {e}")))?;
    Ok(())
}
