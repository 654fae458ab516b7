//! Vision assembly: patch stem, hierarchical stages of cross-scan token
//! mixers and channel mixers with stage-scoped weighted averaging, average
//! pooling and a linear classifier.

mod cross_scan;
pub mod reference;

pub use cross_scan::{cross_scan_paths, CrossScanMixer};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::mixers::{ChannelMixer, ChannelScanMode, Mixer, MixerOptions};
use crate::params::{Bound, LayerNorm, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::wiring::{run_stack, AvgCoeffs, CoeffVars, InitMode, Wiring};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    None,
    /// No SSMs and no convolutions anywhere.
    MlpMixer,
    /// No channel mixers; wiring frozen to plain chaining.
    Vmamba,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Vim2Config {
    pub stage_widths: Vec<usize>,
    pub token_depths: Vec<usize>,
    pub channel_depths: Vec<usize>,
    pub patch_size: usize,
    pub num_classes: usize,
    pub channel_scan_mode: ChannelScanMode,
    pub reduction: Reduction,
    pub image_size: usize,
    pub in_channels: usize,
    /// Inner width of the token mixers as a multiple of the stage width.
    pub token_expand: usize,
    /// Inner width of each stage's channel mixers; `2 × width` when absent.
    pub channel_hidden: Option<Vec<usize>>,
    pub mixer: MixerOptions,
    pub wiring_init: InitMode,
    /// Per-token LayerNorm over channels in front of every mixer.
    pub norm: bool,
}

impl Default for Vim2Config {
    fn default() -> Self {
        Vim2Config::desk()
    }
}

impl Vim2Config {
    /// Tiny: widths 96→768, token depths [2,2,6,2], channel depths [1,1,3,1], 224×224 input.
    ///
    /// Channel mixers run at the stage width; see the README for the counts
    /// under wider channel mixers.
    pub fn tiny() -> Self {
        Vim2Config {
            stage_widths: vec![96, 192, 384, 768],
            token_depths: vec![2, 2, 6, 2],
            channel_depths: vec![1, 1, 3, 1],
            patch_size: 4,
            num_classes: 1000,
            channel_scan_mode: ChannelScanMode::Bidirectional,
            reduction: Reduction::None,
            image_size: 224,
            in_channels: 3,
            token_expand: 2,
            channel_hidden: Some(vec![96, 192, 384, 768]),
            mixer: MixerOptions::default(),
            wiring_init: InitMode::Residual,
            norm: true,
        }
    }

    /// Small model for 32×32 inputs.
    pub fn desk() -> Self {
        Vim2Config {
            stage_widths: vec![8, 16, 32, 64],
            token_depths: vec![1, 1, 2, 1],
            channel_depths: vec![1, 1, 1, 1],
            patch_size: 4,
            num_classes: 10,
            channel_scan_mode: ChannelScanMode::Bidirectional,
            reduction: Reduction::None,
            image_size: 32,
            in_channels: 3,
            token_expand: 2,
            channel_hidden: None,
            mixer: MixerOptions { state: 4, ..MixerOptions::default() },
            wiring_init: InitMode::Residual,
            norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_widths.len();
        if n == 0 || self.token_depths.len() != n || self.channel_depths.len() != n {
            return Err(Error::Config(format!(
                "stage lists must be non-empty and equally long: widths {}, token depths {}, channel depths {}",
                n,
                self.token_depths.len(),
                self.channel_depths.len()
            )));
        }
        if let Some(h) = &self.channel_hidden {
            if h.len() != n {
                return Err(Error::Config(format!("channel_hidden has {} entries for {n} stages", h.len())));
            }
        }
        for s in 0..n {
            let (td, cd) = (self.token_depths[s], self.channel_depths[s]);
            if td == 0 {
                return Err(Error::Config(format!("stage {} has no token mixers", s + 1)));
            }
            if cd > td || (cd > 0 && td % cd != 0) {
                return Err(Error::Config(format!(
                    "stage {}: {cd} channel mixers cannot be spread evenly over {td} token mixers",
                    s + 1
                )));
            }
        }
        let stride = self.patch_size << (n - 1);
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of {stride}",
                self.image_size
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("num_classes and in_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn mixer_options(&self) -> MixerOptions {
        match self.reduction {
            Reduction::MlpMixer => MixerOptions { use_ssm: false, use_conv: false, ..self.mixer },
            _ => self.mixer,
        }
    }

    pub fn channel_hidden(&self, stage: usize) -> usize {
        match &self.channel_hidden {
            Some(h) => h[stage],
            None => 2 * self.stage_widths[stage],
        }
    }

    /// Token grid side length of each stage.
    pub fn grid_sizes(&self) -> Vec<usize> {
        let g = self.image_size / self.patch_size;
        (0..self.stage_widths.len()).map(|s| g >> s).collect()
    }

    /// Whether block `layer` (1-based) of `stage` carries a channel mixer.
    pub fn has_channel_mixer(&self, stage: usize, layer: usize) -> bool {
        let (td, cd) = (self.token_depths[stage], self.channel_depths[stage]);
        self.reduction != Reduction::Vmamba && cd > 0 && layer % (td / cd) == 0
    }
}

#[derive(Clone, Debug)]
pub enum StageWiring {
    Learned(Wiring),
    Frozen(AvgCoeffs),
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub grid: usize,
    pub width: usize,
    pub downsample: Option<Linear>,
    /// Applied to the merged 2×2 features before `downsample`.
    pub down_norm: Option<LayerNorm>,
    pub tokens: Vec<CrossScanMixer>,
    /// One entry per block; `None` passes the channel-mixer input through.
    pub channels: Vec<Option<ChannelMixer>>,
    pub token_norms: Vec<Option<LayerNorm>>,
    pub channel_norms: Vec<Option<LayerNorm>>,
    pub wiring: StageWiring,
}

#[derive(Clone, Debug)]
pub struct Vim2 {
    pub config: Vim2Config,
    pub stem: Linear,
    pub stem_norm: Option<LayerNorm>,
    pub stages: Vec<Stage>,
    /// Applied per token before pooling.
    pub head_norm: Option<LayerNorm>,
    pub head: Linear,
}

fn patch_index(batch: usize, ch: usize, size: usize, patch: usize) -> Vec<usize> {
    let g = size / patch;
    let mut idx = Vec::with_capacity(batch * ch * size * size);
    for b in 0..batch {
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..ch {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            idx.push(((b * ch + c) * size + gy * patch + dy) * size + gx * patch + dx);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn merge_index(batch: usize, side: usize, ch: usize) -> Vec<usize> {
    let half = side / 2;
    let mut idx = Vec::with_capacity(batch * side * side * ch);
    for b in 0..batch {
        for y in 0..half {
            for x in 0..half {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((b * side + 2 * y + dy) * side + 2 * x + dx) * ch;
                    idx.extend(base..base + ch);
                }
            }
        }
    }
    idx
}

impl Vim2 {
    pub fn new(config: Vim2Config, store: &mut ParamStore, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let opts = config.mixer_options();
        let p = config.patch_size;
        let stem = Linear::new(store, rng, "stem", config.in_channels * p * p, config.stage_widths[0], true)?;
        let stem_norm =
            if config.norm { Some(LayerNorm::new(store, "stem_norm", config.stage_widths[0])?) } else { None };
        let grids = config.grid_sizes();
        let mut stages = Vec::with_capacity(grids.len());
        for (s, &grid) in grids.iter().enumerate() {
            let width = config.stage_widths[s];
            let name = format!("stage{}", s + 1);
            let (downsample, down_norm) = if s > 0 {
                let prev = config.stage_widths[s - 1];
                let norm = if config.norm {
                    Some(LayerNorm::new(store, &format!("{name}.down_norm"), 4 * prev)?)
                } else {
                    None
                };
                (Some(Linear::new(store, rng, &format!("{name}.down"), 4 * prev, width, true)?), norm)
            } else {
                (None, None)
            };
            let depth = config.token_depths[s];
            let mut tokens = Vec::with_capacity(depth);
            let mut channels = Vec::with_capacity(depth);
            let mut token_norms = Vec::with_capacity(depth);
            let mut channel_norms = Vec::with_capacity(depth);
            for l in 1..=depth {
                let norm = |store: &mut ParamStore, kind: &str| -> Result<Option<LayerNorm>> {
                    if config.norm {
                        Ok(Some(LayerNorm::new(store, &format!("{name}.block{l}.norm_{kind}"), width)?))
                    } else {
                        Ok(None)
                    }
                };
                token_norms.push(norm(store, "token")?);
                tokens.push(CrossScanMixer::new(
                    store,
                    rng,
                    &format!("{name}.block{l}.token"),
                    (grid, grid),
                    width,
                    config.token_expand * width,
                    &opts,
                )?);
                channel_norms.push(if config.has_channel_mixer(s, l) { norm(store, "channel")? } else { None });
                channels.push(if config.has_channel_mixer(s, l) {
                    let prefix = format!("{name}.block{l}.channel");
                    let hidden = config.channel_hidden(s);
                    Some(match config.channel_scan_mode {
                        ChannelScanMode::Bidirectional => {
                            ChannelMixer::bidirectional(store, rng, &prefix, grid * grid, hidden, &opts)?
                        }
                        ChannelScanMode::PerScan => {
                            let paths = cross_scan_paths(grid, grid);
                            ChannelMixer::per_scan(store, rng, &prefix, &paths, hidden, &opts)?
                        }
                    })
                } else {
                    None
                });
            }
            let wiring = if config.reduction == Reduction::Vmamba {
                StageWiring::Frozen(AvgCoeffs::init(depth, InitMode::Chain))
            } else {
                StageWiring::Learned(Wiring::new(
                    store,
                    &format!("{name}."),
                    &AvgCoeffs::init(depth, config.wiring_init),
                )?)
            };
            stages.push(Stage {
                grid,
                width,
                downsample,
                down_norm,
                tokens,
                channels,
                token_norms,
                channel_norms,
                wiring,
            });
        }
        let last = *config.stage_widths.last().expect("validated");
        let head_norm = if config.norm { Some(LayerNorm::new(store, "head_norm", last)?) } else { None };
        let head = Linear::new(store, rng, "head", last, config.num_classes, true)?;
        Ok(Vim2 { config, stem, stem_norm, stages, head_norm, head })
    }

    fn check_images(&self, tape: &Tape, images: Var) -> Result<usize> {
        let s = tape.shape(images);
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return shape_err(format!(
                "expected images [B, {}, {}, {}], got {s:?}",
                c.in_channels, c.image_size, c.image_size
            ));
        }
        Ok(s[0])
    }

    /// Non-overlapping patch projection `[B, C_in, H, W] -> [B, H/p, W/p, C₁]`.
    pub fn stem(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var> {
        let b = self.check_images(tape, images)?;
        let c = &self.config;
        let g = c.image_size / c.patch_size;
        let idx = patch_index(b, c.in_channels, c.image_size, c.patch_size);
        let patches = tape.gather(images, Arc::new(idx), vec![b, g, g, c.in_channels * c.patch_size * c.patch_size])?;
        let x = self.stem.forward(tape, p, patches)?;
        match &self.stem_norm {
            Some(n) => n.forward(tape, p, x),
            None => Ok(x),
        }
    }

    /// 2×2 patch merge `[B, h, w, C] -> [B, h/2, w/2, C']` through `layer`.
    pub fn downsample(tape: &mut Tape, p: &Bound, layer: &Linear, x: Var) -> Result<Var> {
        Self::downsample_normed(tape, p, None, layer, x)
    }

    /// [`Vim2::downsample`] with an optional norm between the merge and the projection.
    pub fn downsample_normed(
        tape: &mut Tape,
        p: &Bound,
        norm: Option<&LayerNorm>,
        layer: &Linear,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != s[2] || s[1] % 2 != 0 {
            return shape_err(format!("downsample needs an even square grid, got {s:?}"));
        }
        let (b, side, ch) = (s[0], s[1], s[3]);
        let mut merged = tape.gather(x, Arc::new(merge_index(b, side, ch)), vec![b, side / 2, side / 2, 4 * ch])?;
        if let Some(n) = norm {
            merged = n.forward(tape, p, merged)?;
        }
        layer.forward(tape, p, merged)
    }

    fn coeffs(&self, tape: &mut Tape, p: &Bound, stage: &Stage) -> CoeffVars {
        match &stage.wiring {
            StageWiring::Learned(w) => w.bind(p),
            StageWiring::Frozen(c) => CoeffVars::frozen(tape, c),
        }
    }

    /// Downsample (after the first stage) and run every block of `stage`.
    pub fn stage_forward(&self, tape: &mut Tape, p: &Bound, s: usize, x: Var) -> Result<Var> {
        let stage = &self.stages[s];
        let x = match &stage.downsample {
            Some(d) => Self::downsample_normed(tape, p, stage.down_norm.as_ref(), d, x)?,
            None => x,
        };
        let coeffs = self.coeffs(tape, p, stage);
        run_stack(
            tape,
            &coeffs,
            x,
            |tape, l, xt| {
                let xt = match &stage.token_norms[l - 1] {
                    Some(n) => n.forward(tape, p, xt)?,
                    None => xt,
                };
                stage.tokens[l - 1].forward(tape, p, xt)
            },
            |tape, l, xc| match &stage.channels[l - 1] {
                Some(m) => {
                    let xc = match &stage.channel_norms[l - 1] {
                        Some(n) => n.forward(tape, p, xc)?,
                        None => xc,
                    };
                    let shape = tape.shape(xc).to_vec();
                    let flat = tape.reshape(xc, [shape[0], shape[1] * shape[2], shape[3]])?;
                    let y = m.forward(tape, p, flat)?;
                    tape.reshape(y, shape)
                }
                None => Ok(xc),
            },
        )
    }

    /// Global average pool over tokens then the linear head.
    pub fn head_forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let x = match &self.head_norm {
            Some(n) => n.forward(tape, p, x)?,
            None => x,
        };
        let s = tape.shape(x).to_vec();
        let flat = tape.reshape(x, [s[0], s[1] * s[2], s[3]])?;
        let pooled = tape.mean_axis(flat, -2)?;
        self.head.forward(tape, p, pooled)
    }

    /// Logits `[B, num_classes]` for images `[B, C_in, H, W]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, images: Var) -> Result<Var> {
        let mut x = self.stem(tape, p, images)?;
        for s in 0..self.stages.len() {
            x = self.stage_forward(tape, p, s, x)?;
        }
        self.head_forward(tape, p, x)
    }

    /// Convenience forward without gradient tracking.
    pub fn logits(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Learnable scalar count of a configuration, without building its weights
/// on a real tape.
pub fn param_count(config: &Vim2Config) -> Result<usize> {
    let mut store = ParamStore::new();
    Vim2::new(config.clone(), &mut store, &mut SplitMix64::new(0))?;
    Ok(store.num_scalars())
}
