use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Below this `|Δ·A|` the input coefficient uses its `Δ` limit.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-8;

/// `(e^{ΔA} − 1) / A`, or `Δ` when `|ΔA|` is below the series threshold.
pub fn zoh_input_coef(a: f64, delta: f64) -> f64 {
    let z = delta * a;
    if z.abs() < ZOH_SERIES_THRESHOLD {
        delta
    } else {
        z.exp_m1() / a
    }
}

/// Zero-order-hold discretization of one diagonal entry: returns `(Ā, B̄)`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::Validation(format!("step size must be positive, got {delta}")));
    }
    Ok(((delta * a).exp(), zoh_input_coef(a, delta) * b))
}

/// Per-timestep discretized coefficients for one sequence.
///
/// `abar` and `bx` are `[L, E, N]` (`bx` already multiplied by the input),
/// `c` is `[L, N]`.
#[derive(Clone, Debug)]
pub struct SsmCoeffs {
    pub abar: Tensor,
    pub bx: Tensor,
    pub c: Tensor,
}

impl SsmCoeffs {
    /// Discretize selective parameters for input `x[L, E]`.
    ///
    /// `delta` is `[L, E]`, `a` is `[E, N]`, `b` and `c` are `[L, N]`.
    pub fn selective(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor) -> Result<Self> {
        let (l, e) = match x.shape() {
            [l, e] => (*l, *e),
            s => return shape_err(format!("input must be [L, E], got {s:?}")),
        };
        let n = a.shape().get(1).copied().unwrap_or(0);
        if delta.shape() != [l, e] || a.shape() != [e, n] || b.shape() != [l, n] || c.shape() != [l, n] {
            return shape_err(format!(
                "selective coefficients: x {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
                x.shape(),
                delta.shape(),
                a.shape(),
                b.shape(),
                c.shape()
            ));
        }
        let mut abar = Vec::with_capacity(l * e * n);
        let mut bx = Vec::with_capacity(l * e * n);
        for t in 0..l {
            for ch in 0..e {
                let dt = delta.data()[t * e + ch];
                let xv = x.data()[t * e + ch];
                for s in 0..n {
                    let (ab, bb) = discretize_zoh(a.data()[ch * n + s], b.data()[t * n + s], dt)?;
                    abar.push(ab);
                    bx.push(bb * xv);
                }
            }
        }
        Ok(SsmCoeffs { abar: Tensor::new([l, e, n], abar)?, bx: Tensor::new([l, e, n], bx)?, c: c.clone() })
    }

    pub fn len(&self) -> usize {
        self.abar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.abar.shape()[1]
    }

    pub fn state(&self) -> usize {
        self.abar.shape()[2]
    }
}
