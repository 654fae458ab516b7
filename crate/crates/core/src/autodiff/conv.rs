//! Depthwise convolutions on channel-last layouts.

use super::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

// y[l, c] = Σ_j k[c, j] · x[l - j, c], zero for l - j < 0.
fn conv1d_forward(x: &Tensor, k: &Tensor) -> Tensor {
    let r = x.rank();
    let (len, ch) = (x.shape()[r - 2], x.shape()[r - 1]);
    let taps = k.shape()[1];
    let batch = x.len() / (len * ch).max(1);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * len * ch;
        for l in 0..len {
            let orow = &mut out[base + l * ch..base + (l + 1) * ch];
            for j in 0..taps.min(l + 1) {
                let xrow = &xd[base + (l - j) * ch..base + (l - j + 1) * ch];
                for c in 0..ch {
                    orow[c] += kd[c * taps + j] * xrow[c];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("conv1d shape")
}

pub(crate) fn conv1d_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let r = x.rank();
    let (len, ch) = (x.shape()[r - 2], x.shape()[r - 1]);
    let taps = k.shape()[1];
    let batch = x.len() / (len * ch).max(1);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for b in 0..batch {
        let base = b * len * ch;
        for l in 0..len {
            let grow = &gd[base + l * ch..base + (l + 1) * ch];
            for j in 0..taps.min(l + 1) {
                let src = base + (l - j) * ch;
                for c in 0..ch {
                    gx[src + c] += kd[c * taps + j] * grow[c];
                    gk[c * taps + j] += xd[src + c] * grow[c];
                }
            }
        }
    }
    (Tensor::new(x.shape().to_vec(), gx).expect("shape"), Tensor::new(k.shape().to_vec(), gk).expect("shape"))
}

// y[h, w, c] = Σ_{i,j} k[c, i, j] · x[h - i + 1, w - j + 1, c], zero padded.
fn dwconv2d_forward(x: &Tensor, k: &Tensor) -> Tensor {
    let r = x.rank();
    let (hh, ww, ch) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (hh * ww * ch).max(1);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * hh * ww * ch;
        for h in 0..hh {
            for w in 0..ww {
                let o = base + (h * ww + w) * ch;
                for i in 0..3 {
                    let sh = h as isize - i as isize + 1;
                    if sh < 0 || sh >= hh as isize {
                        continue;
                    }
                    for j in 0..3 {
                        let sw = w as isize - j as isize + 1;
                        if sw < 0 || sw >= ww as isize {
                            continue;
                        }
                        let s = base + (sh as usize * ww + sw as usize) * ch;
                        for c in 0..ch {
                            out[o + c] += kd[c * 9 + i * 3 + j] * xd[s + c];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("dwconv shape")
}

pub(crate) fn dwconv2d_backward(x: &Tensor, k: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let r = x.rank();
    let (hh, ww, ch) = (x.shape()[r - 3], x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (hh * ww * ch).max(1);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for b in 0..batch {
        let base = b * hh * ww * ch;
        for h in 0..hh {
            for w in 0..ww {
                let o = base + (h * ww + w) * ch;
                for i in 0..3 {
                    let sh = h as isize - i as isize + 1;
                    if sh < 0 || sh >= hh as isize {
                        continue;
                    }
                    for j in 0..3 {
                        let sw = w as isize - j as isize + 1;
                        if sw < 0 || sw >= ww as isize {
                            continue;
                        }
                        let s = base + (sh as usize * ww + sw as usize) * ch;
                        for c in 0..ch {
                            let kk = c * 9 + i * 3 + j;
                            gx[s + c] += kd[kk] * gd[o + c];
                            gk[kk] += xd[s + c] * gd[o + c];
                        }
                    }
                }
            }
        }
    }
    (Tensor::new(x.shape().to_vec(), gx).expect("shape"), Tensor::new(k.shape().to_vec(), gk).expect("shape"))
}

impl Tape {
    /// Causal depthwise convolution of `x[..., L, C]` with `kernel[C, K]`.
    ///
    /// Tap `j` of the kernel multiplies the input `j` steps in the past, so
    /// `[1, 0, ..]` is the identity and `[0, 1]` delays by one step.
    pub fn conv1d_causal(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if xs.len() < 2 || ks.len() != 2 {
            return shape_err(format!("conv1d_causal {xs:?} with kernel {ks:?}"));
        }
        if ks[1] == 0 {
            return Err(Error::Validation("conv1d kernel needs at least one tap".into()));
        }
        if ks[0] != xs[xs.len() - 1] {
            return shape_err(format!("conv1d channel mismatch: input {xs:?}, kernel {ks:?}"));
        }
        let value = conv1d_forward(self.value(x), self.value(kernel));
        self.push(value, Op::Conv1d { x, k: kernel }, "conv1d_causal")
    }

    /// Same-size depthwise 3×3 convolution of `x[..., H, W, C]` with `kernel[C, 3, 3]`.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(kernel));
        if ks.len() != 3 || ks[1] != 3 || ks[2] != 3 {
            return Err(Error::Unsupported(format!("depthwise kernel {ks:?}; only 3x3 is supported")));
        }
        if xs.len() < 3 || ks[0] != xs[xs.len() - 1] {
            return shape_err(format!("depthwise_conv2d input {xs:?} with kernel {ks:?}"));
        }
        let value = dwconv2d_forward(self.value(x), self.value(kernel));
        self.push(value, Op::DwConv2d { x, k: kernel }, "depthwise_conv2d")
    }
}
