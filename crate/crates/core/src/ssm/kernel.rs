//! The selective scan as a single differentiable tape op.

use serde::{Deserialize, Serialize};

use super::discretize::ZOH_SERIES_THRESHOLD;
use super::scan::{linear_scan_parallel, linear_scan_sequential};
use crate::autodiff::{Op, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanEngine {
    Sequential,
    #[default]
    Parallel,
}

impl ScanEngine {
    fn run(self, a: &[f64], b: &[f64], lanes: usize, len: usize) -> Vec<f64> {
        match self {
            ScanEngine::Sequential => linear_scan_sequential(a, b, lanes, len),
            ScanEngine::Parallel => linear_scan_parallel(a, b, lanes, len),
        }
    }
}

#[derive(Debug)]
pub(crate) struct ScanSaved {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    d: Option<Var>,
    engine: ScanEngine,
    batch: usize,
    len: usize,
    ch: usize,
    st: usize,
    // [batch, L, E, N]
    abar: Vec<f64>,
    coef: Vec<f64>,
    h: Vec<f64>,
}

impl ScanSaved {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.u, self.delta, self.a, self.b, self.c];
        v.extend(self.d);
        v
    }

    pub(crate) fn backward(&self, tape: &Tape, gy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let (bt, l, e, n) = (self.batch, self.len, self.ch, self.st);
        let u = tape.value(self.u).data();
        let delta = tape.value(self.delta).data();
        let a = tape.value(self.a).data();
        let bm = tape.value(self.b).data();
        let cm = tape.value(self.c).data();
        let d = self.d.map(|v| tape.value(v).data());
        let gyd = gy.data();

        let mut gu = vec![0.0; bt * l * e];
        let mut gdelta = vec![0.0; bt * l * e];
        let mut ga = vec![0.0; e * n];
        let mut gb = vec![0.0; bt * l * n];
        let mut gc = vec![0.0; bt * l * n];
        let mut gd = vec![0.0; e];
        let lanes = e * n;

        let mut ra = vec![0.0; l * lanes];
        let mut rb = vec![0.0; l * lanes];
        for bi in 0..bt {
            let so = bi * l * lanes;
            let abar = &self.abar[so..so + l * lanes];
            let coefs = &self.coef[so..so + l * lanes];
            let h = &self.h[so..so + l * lanes];
            // adjoint recurrence gh_t = C_t gy_t + Ā_{t+1} gh_{t+1}, run as a forward scan
            // over reversed time
            for r in 0..l {
                let t = l - 1 - r;
                for ch in 0..e {
                    let g = gyd[(bi * l + t) * e + ch];
                    for s in 0..n {
                        let j = ch * n + s;
                        ra[r * lanes + j] = if r == 0 { 0.0 } else { abar[(t + 1) * lanes + j] };
                        rb[r * lanes + j] = cm[(bi * l + t) * n + s] * g;
                    }
                }
            }
            let rgh = self.engine.run(&ra, &rb, lanes, l);

            for t in 0..l {
                let gh = &rgh[(l - 1 - t) * lanes..(l - t) * lanes];
                let row = (bi * l + t) * e;
                let crow = (bi * l + t) * n;
                for ch in 0..e {
                    let uv = u[row + ch];
                    let dt = delta[row + ch];
                    let g_y = gyd[row + ch];
                    if let Some(dv) = d {
                        gu[row + ch] += dv[ch] * g_y;
                        gd[ch] += g_y * uv;
                    }
                    let mut g_dt = 0.0;
                    let mut g_u = 0.0;
                    for s in 0..n {
                        let j = ch * n + s;
                        let av = a[j];
                        let ab = abar[t * lanes + j];
                        let bv = bm[crow + s];
                        let hv = h[t * lanes + j];
                        let hprev = if t == 0 { 0.0 } else { h[(t - 1) * lanes + j] };
                        let g_h = gh[j];
                        gc[crow + s] += g_y * hv;

                        let z = dt * av;
                        let coef = coefs[t * lanes + j];
                        let g_abar = g_h * hprev;
                        let g_bbar = g_h * uv;
                        g_u += g_h * coef * bv;
                        gb[crow + s] += g_bbar * coef;
                        let (dcoef_ddt, dcoef_da) = if z.abs() < ZOH_SERIES_THRESHOLD {
                            (1.0, 0.5 * dt * dt)
                        } else {
                            (ab, (dt * ab - coef) / av)
                        };
                        g_dt += g_abar * av * ab + g_bbar * bv * dcoef_ddt;
                        ga[j] += g_abar * dt * ab + g_bbar * bv * dcoef_da;
                    }
                    gdelta[row + ch] += g_dt;
                    gu[row + ch] += g_u;
                }
            }
        }

        let shape = |v: Var| tape.value(v).shape().to_vec();
        let mut out = vec![
            (self.u, Tensor::new(shape(self.u), gu)?),
            (self.delta, Tensor::new(shape(self.delta), gdelta)?),
            (self.a, Tensor::new(shape(self.a), ga)?),
            (self.b, Tensor::new(shape(self.b), gb)?),
            (self.c, Tensor::new(shape(self.c), gc)?),
        ];
        if let Some(dv) = self.d {
            out.push((dv, Tensor::new(shape(dv), gd)?));
        }
        Ok(out)
    }
}

impl Tape {
    /// Selective SSM over the second-to-last axis.
    ///
    /// `u` and `delta` are `[..., L, E]`, `a` is `[E, N]`, `b` and `c` are
    /// `[..., L, N]`, `d` is `[E]`. Discretization is zero-order hold; the
    /// state starts at zero for every sequence in the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Option<Var>,
        engine: ScanEngine,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() < 2 {
            return shape_err(format!("selective_scan input {us:?}"));
        }
        let (l, e) = (us[us.len() - 2], us[us.len() - 1]);
        let n = self.shape(a).get(1).copied().unwrap_or(0);
        let mut bc_shape = us.clone();
        *bc_shape.last_mut().unwrap() = n;
        if self.shape(delta) != us.as_slice()
            || self.shape(a) != [e, n]
            || self.shape(b) != bc_shape.as_slice()
            || self.shape(c) != bc_shape.as_slice()
            || d.is_some_and(|d| self.shape(d) != [e])
        {
            return shape_err(format!(
                "selective_scan: u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}",
                us,
                self.shape(delta),
                self.shape(a),
                self.shape(b),
                self.shape(c)
            ));
        }
        let batch = self.value(u).len() / (l * e).max(1);
        let lanes = e * n;
        let (uv, dv, av, bv, cv) = (
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
        );
        if let Some(bad) = dv.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Validation(format!("step size must be positive, got {bad}")));
        }
        let dd = d.map(|d| self.value(d).data());

        let mut abar_all = Vec::with_capacity(batch * l * lanes);
        let mut coef_all = Vec::with_capacity(batch * l * lanes);
        let mut h_all = Vec::with_capacity(batch * l * lanes);
        let mut y = vec![0.0; batch * l * e];
        let mut bx = vec![0.0; l * lanes];
        for bi in 0..batch {
            let start = abar_all.len();
            for t in 0..l {
                let row = (bi * l + t) * e;
                for ch in 0..e {
                    let dt = dv[row + ch];
                    let x = uv[row + ch];
                    for s in 0..n {
                        let j = ch * n + s;
                        let av = av[j];
                        let z = dt * av;
                        let em1 = z.exp_m1();
                        let coef = if z.abs() < ZOH_SERIES_THRESHOLD { dt } else { em1 / av };
                        abar_all.push(1.0 + em1);
                        coef_all.push(coef);
                        bx[t * lanes + j] = coef * bv[(bi * l + t) * n + s] * x;
                    }
                }
            }
            let h = engine.run(&abar_all[start..], &bx, lanes, l);
            for t in 0..l {
                let row = (bi * l + t) * e;
                let crow = &cv[(bi * l + t) * n..(bi * l + t + 1) * n];
                for ch in 0..e {
                    let hs = &h[t * lanes + ch * n..t * lanes + (ch + 1) * n];
                    let mut acc: f64 = hs.iter().zip(crow).map(|(h, c)| h * c).sum();
                    if let Some(dd) = dd {
                        acc += dd[ch] * uv[row + ch];
                    }
                    y[row + ch] = acc;
                }
            }
            h_all.extend_from_slice(&h);
        }
        let value = Tensor::new(us, y)?;
        let saved = ScanSaved {
            u,
            delta,
            a,
            b,
            c,
            d,
            engine,
            batch,
            len: l,
            ch: e,
            st: n,
            abar: abar_all,
            coef: coef_all,
            h: h_all,
        };
        self.push(value, Op::Scan(Box::new(saved)), "selective_scan")
    }
}
