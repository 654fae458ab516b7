use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::mixers::{dt_rank, Conv, Mixer, MixerOptions};
use crate::params::{fan_in_uniform, Bound, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::scan_path::ScanPath;
use crate::ssm::{ScanEngine, SsmParams};
use crate::tensor::Tensor;

/// The four scan orders over an `H×W` grid indexed row-major:
/// row-major, its reversal, column-major, its reversal.
pub fn cross_scan_paths(h: usize, w: usize) -> [ScanPath; 4] {
    let row = ScanPath::identity(h * w);
    let col = ScanPath::new((0..w).flat_map(|c| (0..h).map(move |r| r * w + c)).collect())
        .expect("column-major order is a permutation");
    let (row_rev, col_rev) = (row.reversed(), col.reversed());
    [row, row_rev, col, col_rev]
}

/// Token mixer for a 2D grid: shared projections and depthwise 3×3
/// convolution, then one selective SSM per cross-scan direction.
///
/// Input and output are `[B, H, W, C]`.
#[derive(Clone, Debug)]
pub struct CrossScanMixer {
    pub in_proj: Linear,
    pub mlp_proj: Linear,
    pub conv: Option<Conv>,
    pub heads: Vec<SsmParams>,
    pub out_proj: Linear,
    pub paths: Vec<ScanPath>,
    pub grid: (usize, usize),
    pub engine: ScanEngine,
}

impl CrossScanMixer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        grid: (usize, usize),
        dim: usize,
        hidden: usize,
        opts: &MixerOptions,
    ) -> Result<Self> {
        let in_proj = Linear::new(store, rng, &format!("{prefix}.in_proj"), dim, hidden, true)?;
        let mlp_proj = Linear::new(store, rng, &format!("{prefix}.mlp_proj"), dim, hidden, true)?;
        let conv = if opts.use_conv {
            Some(Conv {
                kernel: store.add(format!("{prefix}.dwconv.kernel"), fan_in_uniform(rng, [hidden, 3, 3], 9))?,
                bias: store.add(format!("{prefix}.dwconv.bias"), Tensor::zeros([hidden]))?,
            })
        } else {
            None
        };
        let paths = cross_scan_paths(grid.0, grid.1).to_vec();
        let mut heads = Vec::new();
        if opts.use_ssm {
            for s in 0..paths.len() {
                heads.push(SsmParams::new(
                    store,
                    rng,
                    &format!("{prefix}.ssm{s}"),
                    hidden,
                    opts.state,
                    dt_rank(hidden),
                    opts.ssm_init(),
                )?);
            }
        }
        let out_proj = Linear::new(store, rng, &format!("{prefix}.out_proj"), hidden, dim, true)?;
        Ok(CrossScanMixer { in_proj, mlp_proj, conv, heads, out_proj, paths, grid, engine: opts.engine })
    }
}

impl Mixer for CrossScanMixer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (h, w) = self.grid;
        if shape.len() != 4 || shape[1] != h || shape[2] != w {
            return shape_err(format!("cross-scan mixer for {h}x{w} grid got {shape:?}"));
        }
        let b = shape[0];
        let e = self.in_proj.fan_out;
        let mut u = self.in_proj.forward(tape, p, x)?;
        if let Some(conv) = &self.conv {
            u = conv.spatial(tape, p, u)?;
        }
        u = tape.silu(u)?;
        let u = tape.reshape(u, [b, h * w, e])?;
        let main = if self.heads.is_empty() {
            u
        } else {
            let mut acc: Option<Var> = None;
            for (path, head) in self.paths.iter().zip(&self.heads) {
                let us = tape.gather_permute(u, path)?;
                let ys = head.forward(tape, p, us, self.engine)?;
                let y = tape.scatter_permute(ys, path)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, y)?,
                    None => y,
                });
            }
            acc.expect("four heads")
        };
        let g = self.mlp_proj.forward(tape, p, x)?;
        let g = tape.silu(g)?;
        let g = tape.reshape(g, [b, h * w, e])?;
        let m = tape.mul(main, g)?;
        let y = self.out_proj.forward(tape, p, m)?;
        tape.reshape(y, shape)
    }
}
