use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn constant_over_time(t: &Tensor) -> bool {
    let per = t.len() / t.shape()[0].max(1);
    let first = &t.data()[..per];
    t.data().chunks(per).all(|row| row == first)
}

/// Unrolled kernel `K̄[k, e] = Σ_n C_n Ā_{e,n}^k B̄_{e,n}` for `k < len`.
///
/// `abar`/`bbar` are `[T, E, N]` and `c` is `[T, N]`; every time slice must be
/// identical, since a time-varying system has no convolution kernel.
pub fn build_lti_kernel(abar: &Tensor, bbar: &Tensor, c: &Tensor, len: usize) -> Result<Tensor> {
    if abar.rank() != 3 || bbar.shape() != abar.shape() || c.rank() != 2 {
        return shape_err(format!("lti kernel: Ā {:?}, B̄ {:?}, C {:?}", abar.shape(), bbar.shape(), c.shape()));
    }
    let (t, e, n) = (abar.shape()[0], abar.shape()[1], abar.shape()[2]);
    if c.shape() != [t, n] || t == 0 {
        return shape_err(format!("lti kernel: C {:?} for Ā {:?}", c.shape(), abar.shape()));
    }
    if !(constant_over_time(abar) && constant_over_time(bbar) && constant_over_time(c)) {
        return Err(Error::Misuse("convolution kernel requested for time-varying coefficients".into()));
    }
    let (a0, b0, c0) = (&abar.data()[..e * n], &bbar.data()[..e * n], &c.data()[..n]);
    let mut power: Vec<f64> = b0.to_vec();
    let mut k = vec![0.0; len * e];
    for step in 0..len {
        for ch in 0..e {
            k[step * e + ch] = (0..n).map(|s| c0[s] * power[ch * n + s]).sum();
        }
        for (p, a) in power.iter_mut().zip(a0) {
            *p *= a;
        }
    }
    Tensor::new([len, e], k)
}

/// Causal per-channel convolution `y[t, e] = Σ_{k ≤ t} K[k, e] x[t - k, e]`.
pub fn lti_conv(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (l, e) = match x.shape() {
        [l, e] => (*l, *e),
        s => return shape_err(format!("lti_conv input {s:?}")),
    };
    if kernel.rank() != 2 || kernel.shape()[1] != e || kernel.shape()[0] < l {
        return shape_err(format!("lti_conv kernel {:?} for input {:?}", kernel.shape(), x.shape()));
    }
    let mut y = vec![0.0; l * e];
    for t in 0..l {
        for k in 0..=t {
            for ch in 0..e {
                y[t * e + ch] += kernel.data()[k * e + ch] * x.data()[(t - k) * e + ch];
            }
        }
    }
    Tensor::new([l, e], y)
}
