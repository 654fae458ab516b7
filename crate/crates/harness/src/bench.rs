//! Wall-time and peak-memory ladders for the mixers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use ssmixer_core::block::MambaMixer;
use ssmixer_core::mixers::{ChannelMixer, Mixer, MixerOptions, TokenMixer};
use ssmixer_core::wiring::InitMode;
use ssmixer_core::{Bound, ParamStore, SplitMix64, Tape, Tensor, Var};

use crate::alloc::{peak_since, reset_peak};
use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Token mixer over sequence length `L`.
    Token,
    /// Channel mixer over channel count `N` at a fixed sequence length.
    Channel,
    /// Two-layer MambaMixer block over `L`.
    Block,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Token => "token",
            Component::Channel => "channel",
            Component::Block => "block",
        })
    }
}

impl FromStr for Component {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Component::Token),
            "channel" => Ok(Component::Channel),
            "block" => Ok(Component::Block),
            _ => Err(HarnessError::Invalid(format!("unknown component {s:?}; expected token|channel|block"))),
        }
    }
}

/// Power-of-two sizes from a `lo:hi` range, e.g. `1024:65536`.
pub fn parse_sizes(spec: &str) -> Result<Vec<usize>> {
    let bad = || HarnessError::Invalid(format!("sizes must look like 1024:65536, got {spec:?}"));
    let (lo, hi) = spec.split_once(':').ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    let mut out = vec![lo];
    while out[out.len() - 1] * 2 <= hi {
        out.push(out[out.len() - 1] * 2);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub component: Component,
    pub size: usize,
    pub median_seconds: f64,
    pub peak_bytes: usize,
    /// Time relative to the previous size; empty for the first row.
    pub ratio: Option<f64>,
    /// Peak bytes relative to the previous size.
    pub peak_ratio: Option<f64>,
}

pub struct BenchOptions {
    pub reps: usize,
    pub warmup: usize,
    /// Each timed sample repeats the forward pass until roughly this many
    /// elements have been processed, so small sizes are not dominated by noise.
    pub work_per_sample: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { reps: 5, warmup: 1, work_per_sample: 1 << 16 }
    }
}

const CHANNEL_SEQ: usize = 16;

type Forward = Box<dyn Fn(&mut Tape, &Bound, Var) -> ssmixer_core::Result<Var>>;

fn setup(component: Component, size: usize) -> Result<(ParamStore, Tensor, Forward)> {
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(7);
    let opts = MixerOptions { state: 4, ..MixerOptions::default() };
    let d = 4;
    Ok(match component {
        Component::Token => {
            let m = TokenMixer::new(&mut store, &mut rng, "token", d, 2 * d, &opts)?;
            let x = Tensor::from_fn([size, d], |_| rng.uniform(-1.0, 1.0));
            (store, x, Box::new(move |t, p, v| m.forward(t, p, v)))
        }
        Component::Channel => {
            let m = ChannelMixer::bidirectional(&mut store, &mut rng, "channel", CHANNEL_SEQ, 2 * CHANNEL_SEQ, &opts)?;
            let x = Tensor::from_fn([CHANNEL_SEQ, size], |_| rng.uniform(-1.0, 1.0));
            (store, x, Box::new(move |t, p, v| m.forward(t, p, v)))
        }
        Component::Block => {
            let m = MambaMixer::new(&mut store, &mut rng, 2, size, d, 2, &opts, InitMode::Residual)?;
            let x = Tensor::from_fn([size, d], |_| rng.uniform(-1.0, 1.0));
            (store, x, Box::new(move |t, p, v| m.forward(t, p, v)))
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median forward time per call and peak extra bytes for each size.
pub fn run(component: Component, sizes: &[usize], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut rows: Vec<BenchRow> = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let (store, x, f) = setup(component, size)?;
        let once = || -> Result<()> {
            let mut t = Tape::new();
            let p = store.bind_frozen(&mut t);
            let xv = t.constant(x.clone());
            std::hint::black_box(f(&mut t, &p, xv)?);
            Ok(())
        };
        for _ in 0..opts.warmup {
            once()?;
        }
        let base = reset_peak();
        once()?;
        let peak_bytes = peak_since(base);
        let iters = (opts.work_per_sample / size).max(1);
        let mut samples = Vec::with_capacity(opts.reps);
        for _ in 0..opts.reps.max(1) {
            let start = Instant::now();
            for _ in 0..iters {
                once()?;
            }
            samples.push(start.elapsed().as_secs_f64() / iters as f64);
        }
        let median_seconds = median(samples);
        let ratio = rows.last().map(|r| median_seconds / r.median_seconds);
        let peak_ratio = rows.last().filter(|r| r.peak_bytes > 0).map(|r| peak_bytes as f64 / r.peak_bytes as f64);
        rows.push(BenchRow { component, size, median_seconds, peak_bytes, ratio, peak_ratio });
    }
    Ok(rows)
}
