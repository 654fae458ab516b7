//! A plain 1D MambaMixer stack on `[..., L, D]` sequences.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::mixers::{ChannelMixer, Mixer, MixerOptions, TokenMixer};
use crate::params::{Bound, ParamStore};
use crate::rng::SplitMix64;
use crate::wiring::{AvgCoeffs, InitMode, Wiring};

#[derive(Clone, Debug)]
pub struct MambaMixer {
    pub tokens: Vec<TokenMixer>,
    pub channels: Vec<ChannelMixer>,
    pub wiring: Wiring,
}

impl MambaMixer {
    /// `len` is the sequence length `L`, which the channel mixers see as
    /// features. Their hidden width is `expand * dim`, so cost stays linear in `L`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        layers: usize,
        len: usize,
        dim: usize,
        expand: usize,
        opts: &MixerOptions,
        init: InitMode,
    ) -> Result<Self> {
        let mut tokens = Vec::with_capacity(layers);
        let mut channels = Vec::with_capacity(layers);
        for l in 1..=layers {
            tokens.push(TokenMixer::new(store, rng, &format!("block{l}.token"), dim, expand * dim, opts)?);
            channels.push(ChannelMixer::bidirectional(
                store,
                rng,
                &format!("block{l}.channel"),
                len,
                expand * dim,
                opts,
            )?);
        }
        let wiring = Wiring::new(store, "", &AvgCoeffs::init(layers, init))?;
        Ok(MambaMixer { tokens, channels, wiring })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let coeffs = self.wiring.bind(p);
        crate::wiring::run_stack(
            tape,
            &coeffs,
            x,
            |t, l, v| self.tokens[l - 1].forward(t, p, v),
            |t, l, v| self.channels[l - 1].forward(t, p, v),
        )
    }
}
