#![allow(dead_code)]

use ssmixer_core::{ParamStore, SplitMix64, Tensor};

pub fn rand_tensor(rng: &mut SplitMix64, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-scale, scale))
}

/// Perturb every parameter so that no weight sits at a special value.
pub fn jitter(store: &mut ParamStore, rng: &mut SplitMix64, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.uniform(-scale, scale);
        }
    }
}

pub fn params_of(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

/// Fixed random projection of `y` to a scalar, so every output element matters.
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
}
