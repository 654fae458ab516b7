//! Finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step for composed blocks. Near `1e-5` roundoff in `f` swamps coordinates
/// whose gradient is near 1e-8; the fourth-order stencil keeps truncation
/// far below tolerance at `1e-3`.
pub const COMPOSED_EPS: f64 = 1e-3;

/// Move SSM parameters to a point where the state path carries signal.
///
/// At initialization activations entering the scan are small and the state
/// contribution is roughly cubic in them, so its gradients fall below
/// finite-difference noise. This sets `b_Δ` to moderate steps and widens
/// the convolution taps and the `B`, `C` projections.
pub fn excite_ssm(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.get_mut(id).data_mut();
        if name.ends_with("b_dt") {
            t.iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 * (i % 3) as f64 - 0.2);
        } else if name.ends_with("w_b") || name.ends_with("w_c") || name.ends_with("conv.kernel") {
            t.iter_mut().for_each(|v| *v *= 3.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over coordinates of `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_err: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compare tape gradients of the scalar `f` against the five-point central
/// difference `(8(f(θ+ε) − f(θ−ε)) − (f(θ+2ε) − f(θ−2ε))) / 12ε`
/// for every coordinate of every tensor in `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let analytic: Vec<Tensor> = if tape.requires_grad(loss) {
        tape.backward(loss)?;
        vars.iter().map(|v| tape.grad(*v).cloned().expect("leaf grad")).collect()
    } else {
        params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let l = f(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, coordinates: 0 };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data()[k];
            let mut at = |h: f64| -> Result<f64> {
                work[pi].data_mut()[k] = orig + h;
                eval(&work)
            };
            let (f1, f2) = (at(eps)? - at(-eps)?, at(2.0 * eps)? - at(-2.0 * eps)?);
            work[pi].data_mut()[k] = orig;
            let numeric = (8.0 * f1 - f2) / (12.0 * eps);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
