use super::{Conv, Mixer, MixerOptions};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::scan_path::ScanPath;
use crate::ssm::{ScanEngine, SsmParams};

/// Unidirectional selective token mixer over the second-to-last axis.
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub in_proj: Linear,
    pub mlp_proj: Linear,
    pub conv: Option<Conv>,
    pub ssm: Option<SsmParams>,
    pub out_proj: Linear,
    pub engine: ScanEngine,
}

impl TokenMixer {
    /// `dim` is `D`; the inner width is `hidden` (`2D` by default in the models).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        dim: usize,
        hidden: usize,
        opts: &MixerOptions,
    ) -> Result<Self> {
        Ok(TokenMixer {
            in_proj: Linear::new(store, rng, &format!("{prefix}.in_proj"), dim, hidden, true)?,
            mlp_proj: Linear::new(store, rng, &format!("{prefix}.mlp_proj"), dim, hidden, true)?,
            conv: opts.new_conv1d(store, rng, &format!("{prefix}.conv"), hidden)?,
            ssm: opts.new_ssm(store, rng, &format!("{prefix}.ssm"), hidden)?,
            out_proj: Linear::new(store, rng, &format!("{prefix}.out_proj"), hidden, dim, true)?,
            engine: opts.engine,
        })
    }
}

impl Mixer for TokenMixer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut u = self.in_proj.forward(tape, p, x)?;
        if let Some(conv) = &self.conv {
            u = conv.causal(tape, p, u)?;
        }
        u = tape.silu(u)?;
        if let Some(ssm) = &self.ssm {
            u = ssm.forward(tape, p, u, self.engine)?;
        }
        let g = self.mlp_proj.forward(tape, p, x)?;
        let g = tape.silu(g)?;
        let m = tape.mul(u, g)?;
        self.out_proj.forward(tape, p, m)
    }
}

/// `d` unidirectional mixers, each scanning the tokens in its own order.
///
/// Output is `Σ_s P_s⁻¹ · mixer_s(P_s · x)`.
#[derive(Clone, Debug)]
pub struct MultiTokenMixer {
    pub paths: Vec<ScanPath>,
    pub mixers: Vec<TokenMixer>,
}

impl MultiTokenMixer {
    pub fn new(paths: Vec<ScanPath>, mixers: Vec<TokenMixer>) -> Result<Self> {
        if paths.len() != mixers.len() || paths.is_empty() {
            return shape_err(format!("{} scan paths for {} mixers", paths.len(), mixers.len()));
        }
        Ok(MultiTokenMixer { paths, mixers })
    }
}

impl Mixer for MultiTokenMixer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (path, m) in self.paths.iter().zip(&self.mixers) {
            let xs = tape.gather_permute(x, path)?;
            let ys = m.forward(tape, p, xs)?;
            let y = tape.scatter_permute(ys, path)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one path"))
    }
}
