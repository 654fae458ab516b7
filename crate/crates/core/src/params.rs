//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::ops::Index;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replace every value from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in other {
            let Some(&i) = self.index.get(name) else {
                return Err(Error::Format(format!("unexpected tensor {name} in checkpoint")));
            };
            if self.values[i].shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("checkpoint is missing {}", self.names[i])));
        }
        Ok(())
    }

    /// Put every parameter on the tape as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.param(v.clone())).collect())
    }

    /// Put every parameter on the tape without gradient tracking.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wrap handles already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn fan_in_uniform(rng: &mut SplitMix64, shape: impl Into<Vec<usize>>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}

/// A dense layer `x · W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SplitMix64,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, [fan_in, fan_out], fan_in))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros([fan_out]))?) } else { None };
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], self.bias.map(|b| p[b]))
    }

    /// Zero both weight and bias.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Standardize each row over the last axis, then `· scale + shift`.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            scale: store.add(format!("{name}.scale"), Tensor::full([dim], 1.0))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros([dim]))?,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let mut rows = shape.clone();
        rows.insert(shape.len() - 1, 1);
        let r = tape.reshape(x, rows)?;
        let n = tape.norm2d(r)?;
        let n = tape.reshape(n, shape)?;
        let s = tape.mul(n, p[self.scale])?;
        tape.add(s, p[self.shift])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_param_count() {
        let mut s = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        Linear::new(&mut s, &mut rng, "fc", 5, 7, true).unwrap();
        assert_eq!(s.num_scalars(), 5 * 7 + 7);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros([1])).unwrap();
        assert!(s.add("w", Tensor::zeros([1])).is_err());
    }
}
