//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { lr: 1e-3, weight_decay: 0.05, betas: (0.9, 0.999), eps: 1e-8 }
    }
}

/// First and second moments per parameter, plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    decay: Vec<bool>,
}

/// Weight decay applies to matrices and convolution kernels only; biases,
/// norm affines, wiring coefficients and SSM state parameters are exempt.
pub fn decays(name: &str, value: &Tensor) -> bool {
    value.rank() >= 2 && !name.ends_with("a_log")
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            v: store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            step: 0,
            decay: store.iter().map(|(n, t)| decays(n, t)).collect(),
        }
    }

    /// Decay every parameter regardless of its kind.
    pub fn decay_all(mut self) -> Self {
        self.decay.fill(true);
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl AdamW {
    /// One update. `grads` is aligned with the store's parameter order; `None`
    /// means the parameter received no gradient and is treated as zero.
    pub fn step(&self, store: &mut ParamStore, grads: &[Option<&Tensor>], state: &mut AdamState) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return shape_err(format!("{} gradients for {} parameters", grads.len(), store.len()));
        }
        state.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(state.step as i32);
        let c2 = 1.0 - b2.powi(state.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let param = store.get_mut(id);
            if let Some(g) = grads[k] {
                if g.shape() != param.shape() {
                    return shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), param.shape()));
                }
            }
            let shrink = if state.decay[k] { 1.0 - self.lr * self.weight_decay } else { 1.0 };
            let m = state.m[k].data_mut();
            let v = state.v[k].data_mut();
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let g = grads[k].map_or(0.0, |g| g.data()[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *p = *p * shrink - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
