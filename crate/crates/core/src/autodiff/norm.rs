use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

pub(crate) fn norm2d_backward(y: &Tensor, inv_std: &[f64], g: &Tensor) -> Tensor {
    let group = y.len() / inv_std.len();
    let n = group as f64;
    let mut out = vec![0.0; y.len()];
    for (gi, &is) in inv_std.iter().enumerate() {
        let ys = &y.data()[gi * group..(gi + 1) * group];
        let gs = &g.data()[gi * group..(gi + 1) * group];
        let mean_g = gs.iter().sum::<f64>() / n;
        let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, gv), yv) in out[gi * group..(gi + 1) * group].iter_mut().zip(gs).zip(ys) {
            *o = is * (gv - mean_g - yv * mean_gy);
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("norm2d shape")
}

impl Tape {
    /// Standardize `x[..., R, C]` jointly over its last two axes.
    ///
    /// Returns the pre-affine output `(x - mean) / sqrt(var + 1e-5)`; callers
    /// apply the per-channel scale and shift.
    pub fn norm2d(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("norm2d needs rank >= 2");
        }
        let group: usize = shape[shape.len() - 2..].iter().product();
        if group < 2 {
            return shape_err("norm2d needs at least two elements per sample");
        }
        let xd = self.value(x).data();
        let groups = xd.len() / group;
        let mut out = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(groups);
        for gi in 0..groups {
            let xs = &xd[gi * group..(gi + 1) * group];
            let mean = xs.iter().sum::<f64>() / group as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / group as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            out.extend(xs.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Norm2d { x, inv_std }, "norm2d")
    }
}
