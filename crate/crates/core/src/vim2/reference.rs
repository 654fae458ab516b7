//! Independent references for the two reduced forms of the vision model.
//!
//! [`mlp_mixer`] recomputes the SSM-free, convolution-free model with plain
//! loops over raw weight arrays: a gated MLP across features for every token,
//! and a gated two-branch MLP across tokens for every channel. [`vmamba`]
//! composes the token mixers one after another with no layer connections.

use super::{Reduction, Vim2};
use crate::autodiff::Tape;
use crate::autodiff::NORM_EPS;
use crate::error::{Error, Result};
use crate::mixers::{ChannelScanMode, Mixer};
use crate::params::{LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::wiring::{AvgCoeffs, Kind};

use super::StageWiring;

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// Dense `[rows, in] -> [rows, out]` from raw weights.
fn dense(store: &ParamStore, layer: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let w = store.get(layer.weight).data();
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let mut out = vec![0.0; rows * fo];
    for r in 0..rows {
        for o in 0..fo {
            let mut acc = 0.0;
            for i in 0..fi {
                acc += x[r * fi + i] * w[i * fo + o];
            }
            out[r * fo + o] = acc;
        }
    }
    if let Some(b) = layer.bias {
        let b = store.get(b).data();
        for r in 0..rows {
            for o in 0..fo {
                out[r * fo + o] += b[o];
            }
        }
    }
    out
}

/// Per-row standardization over `width` then `· scale + shift`, in the same
/// operation order as the tape.
fn layer_norm(store: &ParamStore, norm: Option<&LayerNorm>, x: &[f64], width: usize) -> Vec<f64> {
    let Some(n) = norm else { return x.to_vec() };
    let (scale, shift) = (store.get(n.scale).data(), store.get(n.shift).data());
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        out.extend(row.iter().enumerate().map(|(c, v)| (v - mean) * is * scale[c] + shift[c]));
    }
    out
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

fn coeff_values(store: &ParamStore, wiring: &StageWiring) -> AvgCoeffs {
    match wiring {
        StageWiring::Learned(w) => w.values(store),
        StageWiring::Frozen(c) => c.clone(),
    }
}

/// One image, tokens stored `[side*side, C]` row-major.
fn mlp_mixer_single(model: &Vim2, store: &ParamStore, img: &[f64]) -> Vec<f64> {
    let c = &model.config;
    let (size, p, cin) = (c.image_size, c.patch_size, c.in_channels);
    let g = size / p;
    let mut patches = Vec::with_capacity(g * g * cin * p * p);
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..cin {
                for dy in 0..p {
                    for dx in 0..p {
                        patches.push(img[(ch * size + gy * p + dy) * size + gx * p + dx]);
                    }
                }
            }
        }
    }
    let mut x = dense(store, &model.stem, &patches, g * g);
    x = layer_norm(store, model.stem_norm.as_ref(), &x, c.stage_widths[0]);
    let mut side = g;
    for stage in &model.stages {
        if let Some(down) = &stage.downsample {
            let prev = x.len() / (side * side);
            let half = side / 2;
            let mut merged = Vec::with_capacity(x.len());
            for y in 0..half {
                for xx in 0..half {
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let t = (2 * y + dy) * side + 2 * xx + dx;
                        merged.extend_from_slice(&x[t * prev..(t + 1) * prev]);
                    }
                }
            }
            side = half;
            let merged = layer_norm(store, stage.down_norm.as_ref(), &merged, 4 * prev);
            x = dense(store, down, &merged, side * side);
        }
        let tokens = side * side;
        let width = stage.width;
        let coeffs = coeff_values(store, &stage.wiring);
        let depth = stage.tokens.len();
        let mut yt: Vec<Vec<f64>> = vec![x.clone()];
        let mut yc: Vec<Vec<f64>> = vec![x.clone()];
        for l in 1..=depth {
            let mut xt = vec![0.0; x.len()];
            for i in 0..l {
                let (a, b) = (coeffs.get(Kind::Alpha, l, i), coeffs.get(Kind::Beta, l, i));
                for k in 0..xt.len() {
                    xt[k] += a * yt[i][k] + b * yc[i][k];
                }
            }
            let m = &stage.tokens[l - 1];
            let xt = layer_norm(store, stage.token_norms[l - 1].as_ref(), &xt, width);
            let u = dense(store, &m.in_proj, &xt, tokens);
            let g = dense(store, &m.mlp_proj, &xt, tokens);
            let prod: Vec<f64> = u.iter().zip(&g).map(|(u, g)| silu(*u) * silu(*g)).collect();
            yt.push(dense(store, &m.out_proj, &prod, tokens));

            let mut xc = vec![0.0; x.len()];
            for i in 0..=l {
                let th = coeffs.get(Kind::Theta, l, i);
                for k in 0..xc.len() {
                    xc[k] += th * yt[i][k];
                }
            }
            for i in 0..l {
                let ga = coeffs.get(Kind::Gamma, l, i);
                for k in 0..xc.len() {
                    xc[k] += ga * yc[i][k];
                }
            }
            let out = match &stage.channels[l - 1] {
                None => xc,
                Some(cm) => {
                    let xc = layer_norm(store, stage.channel_norms[l - 1].as_ref(), &xc, width);
                    // every channel's column of token values is one row here
                    let cols = transpose(&xc, tokens, width);
                    let f = dense(store, &cm.branches[0].in_proj, &cols, width);
                    let b = dense(store, &cm.branches[1].in_proj, &cols, width);
                    let g = dense(store, &cm.mlp_proj, &cols, width);
                    let prod: Vec<f64> =
                        f.iter().zip(&b).zip(&g).map(|((f, b), g)| (silu(*f) + silu(*b)) * silu(*g)).collect();
                    let y = dense(store, &cm.out_proj, &prod, width);
                    transpose(&y, width, tokens)
                }
            };
            yc.push(out);
        }
        x = yc.pop().expect("at least one block");
    }
    let width = x.len() / (side * side);
    let x = layer_norm(store, model.head_norm.as_ref(), &x, width);
    let mut pooled = vec![0.0; width];
    for t in 0..side * side {
        for ch in 0..width {
            pooled[ch] += x[t * width + ch];
        }
    }
    let n = (side * side) as f64;
    pooled.iter_mut().for_each(|v| *v /= n);
    dense(store, &model.head, &pooled, 1)
}

/// Logits of an `mlp_mixer`-reduced model computed without the tape.
pub fn mlp_mixer(model: &Vim2, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    let c = &model.config;
    if c.reduction != Reduction::MlpMixer {
        return Err(Error::Config("model was not built with the mlp_mixer reduction".into()));
    }
    if c.channel_scan_mode != ChannelScanMode::Bidirectional {
        return Err(Error::Unsupported("the reference covers the bidirectional channel mixer only".into()));
    }
    let per = c.in_channels * c.image_size * c.image_size;
    if images.rank() != 4
        || images.len() % per != 0
        || images.shape()[1..] != [c.in_channels, c.image_size, c.image_size]
    {
        return Err(Error::Shape(format!("images {:?}", images.shape())));
    }
    let batch = images.shape()[0];
    let mut out = Vec::with_capacity(batch * c.num_classes);
    for b in 0..batch {
        out.extend(mlp_mixer_single(model, store, &images.data()[b * per..(b + 1) * per]));
    }
    Tensor::new([batch, c.num_classes], out)
}

/// Logits of a `vmamba`-reduced model as a plain sequence of token mixers.
pub fn vmamba(model: &Vim2, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
    if model.config.reduction != Reduction::Vmamba {
        return Err(Error::Config("model was not built with the vmamba reduction".into()));
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let img = tape.constant(images.clone());
    let mut x = model.stem(&mut tape, &p, img)?;
    for stage in &model.stages {
        if let Some(d) = &stage.downsample {
            x = Vim2::downsample_normed(&mut tape, &p, stage.down_norm.as_ref(), d, x)?;
        }
        for (m, n) in stage.tokens.iter().zip(&stage.token_norms) {
            if let Some(n) = n {
                x = n.forward(&mut tape, &p, x)?;
            }
            x = m.forward(&mut tape, &p, x)?;
        }
    }
    let y = model.head_forward(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}
