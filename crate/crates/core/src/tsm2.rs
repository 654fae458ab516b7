//! Time-series assembly: auxiliary-feature alignment, per-variate patching,
//! blocks of a causal time mixer and a bidirectional variate mixer with
//! weighted averaging and 2D normalization, and a per-variate linear head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::mixers::{ChannelMixer, Mixer, MixerOptions, TokenMixer};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::wiring::{run_stack, AvgCoeffs, InitMode, Wiring};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tsm2Config {
    /// Number of variates `M`.
    pub variates: usize,
    /// History length `T`.
    pub history: usize,
    /// Forecast horizon `H`.
    pub horizon: usize,
    pub patch: usize,
    /// Token width `D`.
    pub dim: usize,
    pub layers: usize,
    /// Static features per variate `C_S`; 0 disables the static input.
    pub static_features: usize,
    /// Future covariate length `T_Z`.
    pub future_len: usize,
    /// Future covariate features `C_Z`; 0 disables the future input.
    pub future_features: usize,
    /// Standardize over (tokens, features) before every mixer.
    pub norm: bool,
    /// Subtract each variate's last observed value and add it back to the forecast.
    pub instance_norm: bool,
    pub token_expand: usize,
    pub mixer: MixerOptions,
    pub wiring_init: InitMode,
}

impl Default for Tsm2Config {
    fn default() -> Self {
        Tsm2Config {
            variates: 7,
            history: 96,
            horizon: 24,
            patch: 8,
            dim: 16,
            layers: 2,
            static_features: 0,
            future_len: 0,
            future_features: 0,
            norm: true,
            instance_norm: false,
            token_expand: 2,
            mixer: MixerOptions { state: 8, ..MixerOptions::default() },
            wiring_init: InitMode::Residual,
        }
    }
}

impl Tsm2Config {
    pub fn validate(&self) -> Result<()> {
        if self.variates == 0 || self.history == 0 || self.horizon == 0 || self.patch == 0 || self.dim == 0 {
            return Err(Error::Config("variates, history, horizon, patch and dim must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.history < self.patch {
            return Err(Error::Config(format!("history {} shorter than patch {}", self.history, self.patch)));
        }
        if self.future_features > 0 && self.future_len == 0 {
            return Err(Error::Config("future covariates need future_len > 0".into()));
        }
        if self.norm && self.tokens() * self.dim < 2 {
            return Err(Error::Config("2D normalization needs at least two values per variate".into()));
        }
        Ok(())
    }

    /// Width of the aligned input `x ‖ Z_proj ‖ S_proj`.
    pub fn input_len(&self) -> usize {
        let segments = 1 + usize::from(self.future_features > 0) + usize::from(self.static_features > 0);
        segments * self.history
    }

    /// Zeros prepended so the input splits into whole patches.
    pub fn left_pad(&self) -> usize {
        (self.patch - self.input_len() % self.patch) % self.patch
    }

    pub fn tokens(&self) -> usize {
        (self.input_len() + self.left_pad()) / self.patch
    }

    /// Token holding history step `t` (0-based).
    pub fn token_of(&self, t: usize) -> usize {
        (t + self.left_pad()) / self.patch
    }
}

/// Inputs for one batch: `x[B, M, T]`, optional `S[B, M, C_S]` and `Z[B, M, T_Z, C_Z]`.
#[derive(Clone, Debug)]
pub struct SeriesBatch {
    pub x: Tensor,
    pub s: Option<Tensor>,
    pub z: Option<Tensor>,
    /// `[B, M, H]`.
    pub target: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Affine {
            scale: store.add(format!("{prefix}.scale"), Tensor::full([dim], 1.0))?,
            shift: store.add(format!("{prefix}.shift"), Tensor::zeros([dim]))?,
        })
    }

    /// `norm2d(x) · scale + shift` over the last two axes.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.norm2d(x)?;
        let s = tape.mul(n, p[self.scale])?;
        tape.add(s, p[self.shift])
    }
}

#[derive(Clone, Debug)]
pub struct Tsm2Block {
    pub time: TokenMixer,
    pub variate: ChannelMixer,
    pub norm_time: Option<Affine>,
    pub norm_variate: Option<Affine>,
}

#[derive(Clone, Debug)]
pub struct Tsm2 {
    pub config: Tsm2Config,
    pub static_proj: Option<Linear>,
    pub future_mixer: Option<ChannelMixer>,
    pub future_proj: Option<Linear>,
    pub embed: Linear,
    pub blocks: Vec<Tsm2Block>,
    pub wiring: Wiring,
    pub head: Linear,
}

/// Per-block time-mixer outputs, recorded for inspection.
pub struct Trace {
    pub time_outputs: Vec<Var>,
}

impl Tsm2 {
    pub fn new(config: Tsm2Config, store: &mut ParamStore, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let opts = c.mixer;
        let static_proj = if c.static_features > 0 {
            Some(Linear::new(store, rng, "aux.static", c.static_features, c.history, true)?)
        } else {
            None
        };
        let (future_mixer, future_proj) = if c.future_features > 0 {
            let mixer =
                ChannelMixer::bidirectional(store, rng, "aux.future.mixer", c.future_len, 2 * c.future_len, &opts)?;
            let proj = Linear::new(store, rng, "aux.future.proj", c.future_len * c.future_features, c.history, true)?;
            (Some(mixer), Some(proj))
        } else {
            (None, None)
        };
        let embed = Linear::new(store, rng, "embed", c.patch, c.dim, true)?;
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 1..=c.layers {
            let prefix = format!("block{l}");
            let hidden = c.token_expand * c.dim;
            blocks.push(Tsm2Block {
                time: TokenMixer::new(store, rng, &format!("{prefix}.time"), c.dim, hidden, &opts)?,
                variate: ChannelMixer::bidirectional(store, rng, &format!("{prefix}.variate"), c.dim, hidden, &opts)?,
                norm_time: if c.norm { Some(Affine::new(store, &format!("{prefix}.norm_time"), c.dim)?) } else { None },
                norm_variate: if c.norm {
                    Some(Affine::new(store, &format!("{prefix}.norm_variate"), c.dim)?)
                } else {
                    None
                },
            });
        }
        let wiring = Wiring::new(store, "", &AvgCoeffs::init(c.layers, c.wiring_init))?;
        let head = Linear::new(store, rng, "head", c.tokens() * c.dim, c.horizon, true)?;
        Ok(Tsm2 { config, static_proj, future_mixer, future_proj, embed, blocks, wiring, head })
    }

    /// `x ‖ Linear(flatten(ChannelMixer(Z))) ‖ Linear(S)` along time, `[B, M, T′]`.
    pub fn align_auxiliary(&self, tape: &mut Tape, p: &Bound, x: Var, s: Option<Var>, z: Option<Var>) -> Result<Var> {
        let c = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != c.variates || xs[2] != c.history {
            return shape_err(format!("history must be [B, {}, {}], got {xs:?}", c.variates, c.history));
        }
        let mut parts = vec![x];
        match (&self.future_mixer, &self.future_proj, z) {
            (Some(mixer), Some(proj), Some(z)) => {
                let zs = tape.shape(z).to_vec();
                if zs.len() != 4 || zs[..2] != xs[..2] || zs[2] != c.future_len || zs[3] != c.future_features {
                    return shape_err(format!(
                        "future covariates must be [{}, {}, {}, {}], got {zs:?}",
                        xs[0], c.variates, c.future_len, c.future_features
                    ));
                }
                let mixed = mixer.forward(tape, p, z)?;
                let flat = tape.reshape(mixed, [xs[0], xs[1], c.future_len * c.future_features])?;
                parts.push(proj.forward(tape, p, flat)?);
            }
            (None, _, None) => {}
            _ => return Err(Error::Config("future covariates do not match the configuration".into())),
        }
        match (&self.static_proj, s) {
            (Some(proj), Some(s)) => {
                let ss = tape.shape(s).to_vec();
                if ss.len() != 3 || ss[..2] != xs[..2] || ss[2] != c.static_features {
                    return shape_err(format!(
                        "static features must be [{}, {}, {}], got {ss:?}",
                        xs[0], c.variates, c.static_features
                    ));
                }
                parts.push(proj.forward(tape, p, s)?);
            }
            (None, None) => {}
            _ => return Err(Error::Config("static features do not match the configuration".into())),
        }
        if parts.len() == 1 {
            Ok(x)
        } else {
            tape.concat_last(&parts)
        }
    }

    /// Left-pad with zeros, cut into length-`P` windows and embed: `[B, M, n, D]`.
    pub fn patchify(&self, tape: &mut Tape, p: &Bound, series: Var) -> Result<Var> {
        let s = tape.shape(series).to_vec();
        let pad = (self.config.patch - s[2] % self.config.patch) % self.config.patch;
        let padded = if pad > 0 {
            let zeros = tape.constant(Tensor::zeros([s[0], s[1], pad]));
            tape.concat_last(&[zeros, series])?
        } else {
            series
        };
        let n = (s[2] + pad) / self.config.patch;
        let windows = tape.reshape(padded, [s[0], s[1], n, self.config.patch])?;
        self.embed.forward(tape, p, windows)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        s: Option<Var>,
        z: Option<Var>,
    ) -> Result<(Var, Trace)> {
        let c = &self.config;
        let (x, last) = if c.instance_norm {
            let shape = tape.shape(x).to_vec();
            let idx: Vec<usize> = (0..shape[0] * shape[1]).map(|r| r * shape[2] + shape[2] - 1).collect();
            let last = tape.gather(x, idx.into(), vec![shape[0], shape[1], 1])?;
            let rep: Vec<usize> = (0..shape[0] * shape[1]).flat_map(|r| std::iter::repeat(r).take(shape[2])).collect();
            let wide = tape.gather(last, rep.into(), shape)?;
            (tape.sub(x, wide)?, Some(last))
        } else {
            (x, None)
        };
        let aligned = self.align_auxiliary(tape, p, x, s, z)?;
        let tokens = self.patchify(tape, p, aligned)?;
        let coeffs = self.wiring.bind(p);
        let mut time_outputs = Vec::with_capacity(self.blocks.len());
        let y = run_stack(
            tape,
            &coeffs,
            tokens,
            |tape, l, xt| {
                let b = &self.blocks[l - 1];
                let xt = match &b.norm_time {
                    Some(n) => n.forward(tape, p, xt)?,
                    None => xt,
                };
                let y = b.time.forward(tape, p, xt)?;
                time_outputs.push(y);
                Ok(y)
            },
            |tape, l, xc| {
                let b = &self.blocks[l - 1];
                let xc = match &b.norm_variate {
                    Some(n) => n.forward(tape, p, xc)?,
                    None => xc,
                };
                // [B, M, n, D] -> [B, n, M, D]: mix across variates per time token
                let v = tape.permute_axes(xc, &[0, 2, 1, 3])?;
                let y = b.variate.forward_seq(tape, p, v)?;
                tape.permute_axes(y, &[0, 2, 1, 3])
            },
        )?;
        let s = tape.shape(y).to_vec();
        let flat = tape.reshape(y, [s[0], s[1], s[2] * s[3]])?;
        let mut out = self.head.forward(tape, p, flat)?;
        if let Some(last) = last {
            let shape = tape.shape(out).to_vec();
            let rep: Vec<usize> = (0..shape[0] * shape[1]).flat_map(|r| std::iter::repeat(r).take(shape[2])).collect();
            let wide = tape.gather(last, rep.into(), shape)?;
            out = tape.add(out, wide)?;
        }
        Ok((out, Trace { time_outputs }))
    }

    /// Forecast `[B, M, H]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, s: Option<Var>, z: Option<Var>) -> Result<Var> {
        self.forward_traced(tape, p, x, s, z).map(|(y, _)| y)
    }

    /// Put a batch's inputs on the tape and run the model.
    pub fn forward_batch(&self, tape: &mut Tape, p: &Bound, batch: &SeriesBatch) -> Result<Var> {
        let x = tape.constant(batch.x.clone());
        let s = batch.s.as_ref().map(|s| tape.constant(s.clone()));
        let z = batch.z.as_ref().map(|z| tape.constant(z.clone()));
        self.forward(tape, p, x, s, z)
    }

    pub fn predict(&self, store: &ParamStore, batch: &SeriesBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let y = self.forward_batch(&mut tape, &p, batch)?;
        Ok(tape.value(y).clone())
    }
}

/// Repeat each variate's last observed value `horizon` times.
pub fn persistence(x: &Tensor, horizon: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return shape_err(format!("persistence needs [B, M, T], got {:?}", x.shape()));
    }
    let (b, m, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    Ok(Tensor::from_fn([b, m, horizon], |i| d[(i / horizon) * t + t - 1]))
}
