use serde::{Deserialize, Serialize};

use super::{Conv, Mixer, MixerOptions};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::scan_path::ScanPath;
use crate::ssm::{ScanEngine, SsmParams};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelScanMode {
    /// One forward and one flipped branch.
    #[default]
    Bidirectional,
    /// One branch per token scan order; odd orders scan the channels backwards.
    PerScan,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub in_proj: Linear,
    pub conv: Option<Conv>,
    pub ssm: Option<SsmParams>,
    pub reverse: bool,
    /// Token order applied before transposing, per-scan mode only.
    pub tokens: Option<ScanPath>,
}

/// Bidirectional selective mixer along the channel axis.
///
/// [`ChannelMixer::forward`] takes `[..., L, D]`, transposes so the `D`
/// channels form the scanned sequence and the `L` tokens are the features,
/// mixes, and transposes back. [`ChannelMixer::forward_seq`] skips the
/// transposes for inputs already laid out as `[..., channels, features]`.
#[derive(Clone, Debug)]
pub struct ChannelMixer {
    pub branches: Vec<Branch>,
    pub mlp_proj: Linear,
    pub out_proj: Linear,
    pub engine: ScanEngine,
}

impl ChannelMixer {
    fn branch(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        features: usize,
        hidden: usize,
        opts: &MixerOptions,
        reverse: bool,
        tokens: Option<ScanPath>,
    ) -> Result<Branch> {
        Ok(Branch {
            in_proj: Linear::new(store, rng, &format!("{prefix}.in_proj"), features, hidden, true)?,
            conv: opts.new_conv1d(store, rng, &format!("{prefix}.conv"), hidden)?,
            ssm: opts.new_ssm(store, rng, &format!("{prefix}.ssm"), hidden)?,
            reverse,
            tokens,
        })
    }

    /// `features` is the width of each scanned element (the token count `L`
    /// when used through [`ChannelMixer::forward`]).
    pub fn bidirectional(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        features: usize,
        hidden: usize,
        opts: &MixerOptions,
    ) -> Result<Self> {
        let fwd = Self::branch(store, rng, &format!("{prefix}.fwd"), features, hidden, opts, false, None)?;
        let bwd = Self::branch(store, rng, &format!("{prefix}.bwd"), features, hidden, opts, true, None)?;
        Self::finish(store, rng, prefix, features, hidden, opts, vec![fwd, bwd])
    }

    pub fn per_scan(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        paths: &[ScanPath],
        hidden: usize,
        opts: &MixerOptions,
    ) -> Result<Self> {
        let Some(first) = paths.first() else {
            return shape_err("per-scan channel mixer needs at least one path");
        };
        let features = first.len();
        let mut branches = Vec::with_capacity(paths.len());
        for (s, path) in paths.iter().enumerate() {
            if path.len() != features {
                return shape_err("scan paths of different lengths");
            }
            let name = format!("{prefix}.scan{s}");
            branches.push(Self::branch(store, rng, &name, features, hidden, opts, s % 2 == 1, Some(path.clone()))?);
        }
        Self::finish(store, rng, prefix, features, hidden, opts, branches)
    }

    fn finish(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        features: usize,
        hidden: usize,
        opts: &MixerOptions,
        branches: Vec<Branch>,
    ) -> Result<Self> {
        Ok(ChannelMixer {
            branches,
            mlp_proj: Linear::new(store, rng, &format!("{prefix}.mlp_proj"), features, hidden, true)?,
            out_proj: Linear::new(store, rng, &format!("{prefix}.out_proj"), hidden, features, true)?,
            engine: opts.engine,
        })
    }

    fn run_branch(&self, tape: &mut Tape, p: &Bound, b: &Branch, xt: Var) -> Result<Var> {
        let mut u = if b.reverse { tape.flip(xt, -2)? } else { xt };
        u = b.in_proj.forward(tape, p, u)?;
        if let Some(conv) = &b.conv {
            u = conv.causal(tape, p, u)?;
        }
        u = tape.silu(u)?;
        if let Some(ssm) = &b.ssm {
            u = ssm.forward(tape, p, u, self.engine)?;
        }
        if b.reverse {
            u = tape.flip(u, -2)?;
        }
        Ok(u)
    }

    /// Each branch's SSM output in the transposed layout, already flipped
    /// back for reversed branches, before gating.
    pub fn branch_outputs(&self, tape: &mut Tape, p: &Bound, x: Var, transposed: bool) -> Result<Vec<Var>> {
        let xt = if transposed { tape.transpose_last2(x)? } else { x };
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let input = match (&b.tokens, transposed) {
                (Some(path), true) => {
                    let xs = tape.gather_permute(x, path)?;
                    tape.transpose_last2(xs)?
                }
                (Some(_), false) => return shape_err("per-scan branches need the transposed layout"),
                (None, _) => xt,
            };
            outs.push(self.run_branch(tape, p, b, input)?);
        }
        Ok(outs)
    }

    fn mix(&self, tape: &mut Tape, p: &Bound, x: Var, transposed: bool) -> Result<Var> {
        let outs = self.branch_outputs(tape, p, x, transposed)?;
        let xt = if transposed { tape.transpose_last2(x)? } else { x };
        let mut acc = outs[0];
        for &u in &outs[1..] {
            acc = tape.add(acc, u)?;
        }
        let g = self.mlp_proj.forward(tape, p, xt)?;
        let g = tape.silu(g)?;
        let m = tape.mul(acc, g)?;
        let y = self.out_proj.forward(tape, p, m)?;
        if transposed {
            tape.transpose_last2(y)
        } else {
            Ok(y)
        }
    }

    /// Mix `[..., S, F]` along `S` without transposing.
    pub fn forward_seq(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.mix(tape, p, x, false)
    }
}

impl Mixer for ChannelMixer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.mix(tape, p, x, true)
    }
}
