use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::ssm::ScanEngine;
use crate::tensor::Tensor;

/// Initialization options for one selective SSM.
#[derive(Clone, Copy, Debug)]
pub struct SsmInit {
    /// Include the direct feedthrough `D x_t`.
    pub d_skip: bool,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmInit {
    fn default() -> Self {
        SsmInit { d_skip: true, dt_min: 1e-3, dt_max: 1e-1 }
    }
}

/// Learnable parameters of a selective SSM over `E` channels with state size `N`.
///
/// `A = -exp(a_log)` keeps the state matrix strictly negative. The step-size
/// projection is factored through rank `r`: `Δ = softplus(x·W_down·W_up + b_Δ)`.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt_down: ParamId,
    pub w_dt_up: ParamId,
    pub b_dt: ParamId,
    pub d_skip: Option<ParamId>,
    pub channels: usize,
    pub state: usize,
    pub dt_rank: usize,
}

/// Per-timestep `B_t`, `C_t` (`[..., L, N]`) and `Δ_t` (`[..., L, E]`).
#[derive(Clone, Copy, Debug)]
pub struct SelectiveProjections {
    pub b: Var,
    pub c: Var,
    pub delta: Var,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: &str,
        channels: usize,
        state: usize,
        dt_rank: usize,
        init: SsmInit,
    ) -> Result<Self> {
        let (e, n, r) = (channels, state, dt_rank.max(1));
        // S4D-real: A[e, n] = -(n + 1)
        let a_log = Tensor::from_fn([e, n], |i| ((i % n) as f64 + 1.0).ln());
        let (lo, hi) = (init.dt_min.ln(), init.dt_max.ln());
        let b_dt = Tensor::from_fn([e], |_| inverse_softplus(rng.uniform(lo, hi).exp()));
        Ok(SsmParams {
            a_log: store.add(format!("{prefix}.a_log"), a_log)?,
            w_b: store.add(format!("{prefix}.w_b"), fan_in_uniform(rng, [e, n], e))?,
            w_c: store.add(format!("{prefix}.w_c"), fan_in_uniform(rng, [e, n], e))?,
            w_dt_down: store.add(format!("{prefix}.w_dt_down"), fan_in_uniform(rng, [e, r], e))?,
            w_dt_up: store.add(format!("{prefix}.w_dt_up"), fan_in_uniform(rng, [r, e], r))?,
            b_dt: store.add(format!("{prefix}.b_dt"), b_dt)?,
            d_skip: if init.d_skip { Some(store.add(format!("{prefix}.d"), Tensor::full([e], 1.0))?) } else { None },
            channels: e,
            state: n,
            dt_rank: r,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.a_log, self.w_b, self.w_c, self.w_dt_down, self.w_dt_up, self.b_dt];
        v.extend(self.d_skip);
        v
    }

    /// `A = -exp(a_log)`, shape `[E, N]`.
    pub fn a(&self, tape: &mut Tape, p: &Bound) -> Result<Var> {
        let e = tape.exp(p[self.a_log])?;
        tape.neg(e)
    }

    /// Input-dependent `B_t = x_t W_B`, `C_t = x_t W_C`, `Δ_t = softplus(x_t W_Δ + b_Δ)`.
    pub fn project(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<SelectiveProjections> {
        let b = tape.matmul(x, p[self.w_b])?;
        let c = tape.matmul(x, p[self.w_c])?;
        let low = tape.matmul(x, p[self.w_dt_down])?;
        let pre = tape.linear(low, p[self.w_dt_up], Some(p[self.b_dt]))?;
        let delta = tape.softplus(pre)?;
        Ok(SelectiveProjections { b, c, delta })
    }

    /// Run the selective SSM on `x[..., L, E]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, engine: ScanEngine) -> Result<Var> {
        let proj = self.project(tape, p, x)?;
        let a = self.a(tape, p)?;
        tape.selective_scan(x, proj.delta, a, proj.b, proj.c, self.d_skip.map(|d| p[d]), engine)
    }

    /// Copy every value from `other`, which must have the same dimensions.
    pub fn copy_from(&self, store: &mut ParamStore, other: &SsmParams) {
        for (dst, src) in self.ids().into_iter().zip(other.ids()) {
            let v = store.get(src).clone();
            *store.get_mut(dst) = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_ranges() {
        let mut s = ParamStore::new();
        let mut rng = SplitMix64::new(9);
        let p = SsmParams::new(&mut s, &mut rng, "ssm", 6, 4, 2, SsmInit::default()).unwrap();
        let a_log = s.get(p.a_log);
        assert_eq!(a_log.at(&[3, 2]), 3f64.ln());
        for &b in s.get(p.b_dt).data() {
            let dt = crate::autodiff::softplus(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "dt {dt}");
        }
        assert!(s.get(p.d_skip.unwrap()).data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn zero_input_projections() {
        let mut s = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let p = SsmParams::new(&mut s, &mut rng, "ssm", 3, 2, 1, SsmInit::default()).unwrap();
        let mut t = Tape::new();
        let bound = s.bind_frozen(&mut t);
        let x = t.constant(Tensor::zeros([4, 3]));
        let pr = p.project(&mut t, &bound, x).unwrap();
        assert!(t.value(pr.b).data().iter().all(|v| *v == 0.0));
        assert!(t.value(pr.c).data().iter().all(|v| *v == 0.0));
        let bdt = s.get(p.b_dt).data().to_vec();
        for row in t.value(pr.delta).data().chunks(3) {
            for (d, b) in row.iter().zip(&bdt) {
                assert!((d - crate::autodiff::softplus(*b)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_weights_give_ln2_steps() {
        let mut s = ParamStore::new();
        let mut rng = SplitMix64::new(2);
        let p = SsmParams::new(&mut s, &mut rng, "ssm", 3, 2, 1, SsmInit::default()).unwrap();
        s.get_mut(p.w_dt_up).data_mut().fill(0.0);
        s.get_mut(p.b_dt).data_mut().fill(0.0);
        let mut t = Tape::new();
        let bound = s.bind_frozen(&mut t);
        let x = t.constant(Tensor::from_fn([5, 3], |i| (i as f64).cos()));
        let pr = p.project(&mut t, &bound, x).unwrap();
        assert!(t.value(pr.delta).data().iter().all(|d| (d - std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn identical_rows_identical_projections() {
        let mut s = ParamStore::new();
        let mut rng = SplitMix64::new(4);
        let p = SsmParams::new(&mut s, &mut rng, "ssm", 3, 2, 2, SsmInit::default()).unwrap();
        let mut t = Tape::new();
        let bound = s.bind_frozen(&mut t);
        let x = t.constant(Tensor::from_fn([4, 3], |i| [0.2, -0.7, 1.1][i % 3]));
        let pr = p.project(&mut t, &bound, x).unwrap();
        for v in [pr.b, pr.c, pr.delta] {
            let val = t.value(v);
            let w = val.shape()[1];
            for row in val.data().chunks(w) {
                assert_eq!(row, &val.data()[..w]);
            }
        }
    }
}
