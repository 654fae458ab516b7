//! End-to-end acceptance run. One PASS/FAIL line per criterion; exits
//! nonzero if any fails. Pass criterion numbers to run a subset, e.g.
//! `cargo test --test acceptance -- 1 7`.

use std::process::ExitCode;
use std::time::Instant;

use ssmixer::alloc::{tune_allocator, CountingAlloc};
use ssmixer::bench::{self, BenchOptions, BenchRow, Component};
use ssmixer::experiment::{self, ExperimentConfig, Flow};
use ssmixer::verify;
use ssmixer::Result;
use ssmixer_core::ssm::combine;
use ssmixer_core::vim2::{param_count, Reduction, Vim2Config};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { ok, detail })
}

fn scan() -> Result<Outcome> {
    let start = Instant::now();
    let err = verify::scan_equivalence(100, 1, combine)?;
    let secs = start.elapsed().as_secs_f64();
    outcome(err <= 1e-10 && secs < 30.0, format!("max err {err:.3e} (<= 1e-10), {secs:.1} s (< 30 s)"))
}

fn lti() -> Result<Outcome> {
    let err = verify::lti_equivalence(100, 2)?;
    outcome(err <= 1e-8, format!("max err {err:.3e} (<= 1e-8)"))
}

fn gradient() -> Result<Outcome> {
    let err = verify::block_gradient(22)?;
    outcome(err <= 1e-4, format!("max rel err {err:.3e} (<= 1e-4)"))
}

fn reductions() -> Result<Outcome> {
    let mlp = verify::reduction_gap(Reduction::MlpMixer, 4, 3)?;
    let vm = verify::reduction_gap(Reduction::Vmamba, 4, 4)?;
    outcome(mlp <= 1e-12 && vm <= 1e-12, format!("mlp-mixer {mlp:.3e}, vmamba {vm:.3e} (<= 1e-12)"))
}

fn coefficients() -> Result<Outcome> {
    let bad = verify::coefficient_mismatches(50)?;
    outcome(bad == 0, format!("{bad} mismatches for L = 1..50"))
}

fn params() -> Result<Outcome> {
    let n = param_count(&Vim2Config::tiny())?;
    let (lo, hi) = verify::TINY_RANGE;
    outcome((lo..=hi).contains(&n), format!("{n} scalars (in [{lo}, {hi}])"))
}

fn ratios(rows: &[BenchRow]) -> String {
    rows.iter().filter_map(|r| r.ratio).map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(" ")
}

fn scaling() -> Result<Outcome> {
    let start = Instant::now();
    let sizes: Vec<usize> = (12..=16).map(|k| 1 << k).collect();
    let opts = BenchOptions::default();
    let token = bench::run(Component::Token, &sizes, &opts)?;
    let channel = bench::run(Component::Channel, &sizes, &opts)?;
    let secs = start.elapsed().as_secs_f64();
    let in_band = |rows: &[BenchRow]| rows.iter().filter_map(|r| r.ratio).all(|r| (1.6..=2.6).contains(&r));
    let ok = in_band(&token) && in_band(&channel) && secs < 300.0;
    outcome(
        ok,
        format!("token [{}], channel [{}] (in [1.6, 2.6]), {secs:.0} s (< 300 s)", ratios(&token), ratios(&channel)),
    )
}

fn causality() -> Result<Outcome> {
    let leak = verify::time_mixer_leak(20, 5)?;
    outcome(leak <= 1e-14, format!("max change {leak:.3e} (<= 1e-14)"))
}

fn learning() -> Result<Outcome> {
    let start = Instant::now();
    let ts = experiment::train(&ExperimentConfig::tsm2_desk(), |r| {
        if r.val_metric <= 0.8 {
            Flow::Stop
        } else {
            Flow::Continue
        }
    })?;
    let ts_secs = start.elapsed().as_secs_f64();
    let ts_best = ts.records.iter().map(|r| r.val_metric).fold(f64::INFINITY, f64::min);
    let ts_ok = ts_best <= 0.8 && ts_secs < 600.0;

    let start = Instant::now();
    let img = experiment::train(&ExperimentConfig::vim2_desk(), |r| {
        if r.val_metric >= 0.9 {
            Flow::Stop
        } else {
            Flow::Continue
        }
    })?;
    let img_secs = start.elapsed().as_secs_f64();
    let img_best = img.records.iter().map(|r| r.val_metric).fold(0.0, f64::max);
    let img_ok = img_best >= 0.9;
    outcome(
        ts_ok && img_ok,
        format!(
            "tsm2 mse ratio {ts_best:.3} (<= 0.8) at epoch {} in {ts_secs:.0} s; vim2 accuracy {img_best:.3} (>= 0.9) at epoch {} in {img_secs:.0} s",
            ts.records.len(),
            img.records.len()
        ),
    )
}

fn determinism() -> Result<Outcome> {
    let configs = [
        ExperimentConfig { epochs: 2, ..ExperimentConfig::tsm2_desk() },
        ExperimentConfig { epochs: 1, ..ExperimentConfig::vim2_desk() },
    ];
    let mut same = true;
    let mut checked = 0;
    for cfg in &configs {
        let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
        for d in &dirs {
            let t = experiment::train(cfg, |_| Flow::Continue)?;
            experiment::write_run(d.path(), cfg, &t)?;
        }
        for f in ["run.csv", "checkpoint.ntf"] {
            let read = |i: usize| std::fs::read(dirs[i].path().join(f)).expect("run file");
            same &= read(0) == read(1);
            checked += 1;
        }
    }
    outcome(same, format!("{checked} files compared byte for byte"))
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 10] = [
    ("scan engine equivalence", scan),
    ("lti convolution equivalence", lti),
    ("block gradient fidelity", gradient),
    ("reduction identities", reductions),
    ("coefficient count", coefficients),
    ("vim2-tiny parameter audit", params),
    ("linear scaling", scaling),
    ("time-mixer causality", causality),
    ("desk-scale learning", learning),
    ("determinism", determinism),
];

fn main() -> ExitCode {
    tune_allocator();
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let (ok, detail) = match check() {
            Ok(o) => (o.ok, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!ok);
        println!("{} {n:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
