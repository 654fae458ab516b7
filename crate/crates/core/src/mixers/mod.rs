//! Selective token and channel mixers.
//!
//! Every mixer maps `[..., L, D] -> [..., L, D]`. The main branch is
//! `SSM(SiLU(Conv(Linear(x))))`, gated elementwise by `SiLU(Linear(x))` and
//! projected back to `D`.

mod channel;
mod token;

pub use channel::{ChannelMixer, ChannelScanMode};
pub use token::{MultiTokenMixer, TokenMixer};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::ssm::{ScanEngine, SsmInit, SsmParams};
use crate::tensor::Tensor;

/// Settings shared by every mixer in a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerOptions {
    /// SSM state size `N`.
    pub state: usize,
    /// Width of the causal 1D convolution.
    pub conv_width: usize,
    /// Include the `D x_t` feedthrough in every SSM.
    pub d_skip: bool,
    pub engine: ScanEngine,
    /// When false the SSM is removed and the main branch ends after the activation.
    pub use_ssm: bool,
    /// When false the convolution is removed.
    pub use_conv: bool,
}

impl Default for MixerOptions {
    fn default() -> Self {
        MixerOptions {
            state: 16,
            conv_width: 4,
            d_skip: true,
            engine: ScanEngine::Parallel,
            use_ssm: true,
            use_conv: true,
        }
    }
}

impl MixerOptions {
    pub fn ssm_init(&self) -> SsmInit {
        SsmInit { d_skip: self.d_skip, ..SsmInit::default() }
    }

    pub(crate) fn new_ssm(
        &self,
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        channels: usize,
    ) -> Result<Option<SsmParams>> {
        if !self.use_ssm {
            return Ok(None);
        }
        SsmParams::new(store, rng, prefix, channels, self.state, dt_rank(channels), self.ssm_init()).map(Some)
    }

    pub(crate) fn new_conv1d(
        &self,
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        channels: usize,
    ) -> Result<Option<Conv>> {
        if !self.use_conv {
            return Ok(None);
        }
        let k = self.conv_width;
        Ok(Some(Conv {
            kernel: store.add(format!("{prefix}.kernel"), fan_in_uniform(rng, [channels, k], k))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([channels]))?,
        }))
    }
}

/// Rank of the low-rank step-size projection for `channels` SSM channels.
pub fn dt_rank(channels: usize) -> usize {
    channels.div_ceil(32).max(1)
}

/// Depthwise convolution weights plus per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn causal(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d_causal(x, p[self.kernel])?;
        tape.add(y, p[self.bias])
    }

    pub fn spatial(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.depthwise_conv2d(x, p[self.kernel])?;
        tape.add(y, p[self.bias])
    }
}

/// Anything that maps `[..., L, D]` to the same shape.
pub trait Mixer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var>;
}
