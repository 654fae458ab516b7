//! Weighted-averaging layer connections.
//!
//! For block `ℓ ∈ 1..=𝓛` with `y_T⁽⁰⁾ = y_C⁽⁰⁾ = x`:
//!
//! ```text
//! x_T⁽ℓ⁾ = Σ_{i<ℓ} α_{ℓ,i} y_T⁽ⁱ⁾ + Σ_{i<ℓ} β_{ℓ,i} y_C⁽ⁱ⁾
//! x_C⁽ℓ⁾ = Σ_{i≤ℓ} θ_{ℓ,i} y_T⁽ⁱ⁾ + Σ_{i<ℓ} γ_{ℓ,i} y_C⁽ⁱ⁾
//! ```
//!
//! Block `ℓ` has `4ℓ + 1` coefficients, `𝓛(2𝓛 + 3)` in total.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `α_{ℓ,ℓ−1} = θ_{ℓ,ℓ} = 1`, everything else 0.
    Chain,
    /// Chain plus `γ_{ℓ,ℓ−1} = 1`.
    #[default]
    Residual,
    /// Every coefficient is `1 / (number of summands)`.
    Uniform,
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chain" => Ok(InitMode::Chain),
            "residual" => Ok(InitMode::Residual),
            "uniform" => Ok(InitMode::Uniform),
            other => Err(Error::Config(format!("unknown wiring init mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Alpha,
    Beta,
    Theta,
    Gamma,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::Alpha, Kind::Beta, Kind::Theta, Kind::Gamma];

    pub fn name(self) -> &'static str {
        match self {
            Kind::Alpha => "alpha",
            Kind::Beta => "beta",
            Kind::Theta => "theta",
            Kind::Gamma => "gamma",
        }
    }

    /// Number of coefficients of this kind for block `layer` (1-based).
    pub fn width(self, layer: usize) -> usize {
        match self {
            Kind::Theta => layer + 1,
            _ => layer,
        }
    }
}

/// Coefficient values for a stack; `values[k][ℓ-1][i]` with `k` indexing [`Kind::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct AvgCoeffs {
    layers: usize,
    values: [Vec<Vec<f64>>; 4],
}

impl AvgCoeffs {
    pub fn zeros(layers: usize) -> Self {
        let values = Kind::ALL.map(|k| (1..=layers).map(|l| vec![0.0; k.width(l)]).collect());
        AvgCoeffs { layers, values }
    }

    pub fn init(layers: usize, mode: InitMode) -> Self {
        let mut c = Self::zeros(layers);
        for l in 1..=layers {
            match mode {
                InitMode::Chain | InitMode::Residual => {
                    c.set(Kind::Alpha, l, l - 1, 1.0);
                    c.set(Kind::Theta, l, l, 1.0);
                    if mode == InitMode::Residual {
                        c.set(Kind::Gamma, l, l - 1, 1.0);
                    }
                }
                InitMode::Uniform => {
                    let tok = 1.0 / (2 * l) as f64;
                    let ch = 1.0 / (2 * l + 1) as f64;
                    for k in Kind::ALL {
                        let v = if matches!(k, Kind::Alpha | Kind::Beta) { tok } else { ch };
                        c.values[k as usize][l - 1].fill(v);
                    }
                }
            }
        }
        c
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, kind: Kind, layer: usize, i: usize) -> f64 {
        self.values[kind as usize][layer - 1][i]
    }

    pub fn set(&mut self, kind: Kind, layer: usize, i: usize, v: f64) {
        self.values[kind as usize][layer - 1][i] = v;
    }

    /// Every coefficient as `(kind, layer, index, value)`, in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (Kind, usize, usize, f64)> + '_ {
        (1..=self.layers).flat_map(move |l| {
            Kind::ALL
                .into_iter()
                .flat_map(move |k| self.values[k as usize][l - 1].iter().enumerate().map(move |(i, &v)| (k, l, i, v)))
        })
    }

    pub fn count(&self) -> usize {
        self.entries().count()
    }
}

/// Closed-form coefficient count for `layers` blocks.
pub fn coefficient_count(layers: usize) -> usize {
    layers * (2 * layers + 3)
}

pub fn coeff_name(prefix: &str, kind: Kind, layer: usize, i: usize) -> String {
    format!("{prefix}avg.{}.{layer}.{i}", kind.name())
}

/// Learnable coefficients registered in a [`ParamStore`] as rank-0 tensors.
#[derive(Clone, Debug)]
pub struct Wiring {
    layers: usize,
    ids: [Vec<Vec<ParamId>>; 4],
}

impl Wiring {
    pub fn new(store: &mut ParamStore, prefix: &str, init: &AvgCoeffs) -> Result<Self> {
        let mut ids: [Vec<Vec<ParamId>>; 4] = Default::default();
        for l in 1..=init.layers {
            for k in Kind::ALL {
                let mut row = Vec::with_capacity(k.width(l));
                for i in 0..k.width(l) {
                    let v = init.get(k, l, i);
                    row.push(store.add(coeff_name(prefix, k, l, i), Tensor::scalar(v))?);
                }
                ids[k as usize].push(row);
            }
        }
        Ok(Wiring { layers: init.layers, ids })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn id(&self, kind: Kind, layer: usize, i: usize) -> ParamId {
        self.ids[kind as usize][layer - 1][i]
    }

    /// Current values from the store.
    pub fn values(&self, store: &ParamStore) -> AvgCoeffs {
        let mut c = AvgCoeffs::zeros(self.layers);
        for l in 1..=self.layers {
            for k in Kind::ALL {
                for i in 0..k.width(l) {
                    c.set(k, l, i, store.get(self.id(k, l, i)).data()[0]);
                }
            }
        }
        c
    }

    pub fn write(&self, store: &mut ParamStore, values: &AvgCoeffs) {
        for (k, l, i, v) in values.entries() {
            store.get_mut(self.id(k, l, i)).data_mut()[0] = v;
        }
    }

    pub fn bind(&self, p: &Bound) -> CoeffVars {
        let ids = &self.ids;
        CoeffVars {
            layers: self.layers,
            vars: std::array::from_fn(|k| ids[k].iter().map(|row| row.iter().map(|&id| p[id]).collect()).collect()),
        }
    }
}

/// Coefficients as tape nodes, either bound parameters or frozen constants.
#[derive(Clone, Debug)]
pub struct CoeffVars {
    layers: usize,
    vars: [Vec<Vec<Var>>; 4],
}

impl CoeffVars {
    pub fn frozen(tape: &mut Tape, values: &AvgCoeffs) -> Self {
        let mut vars: [Vec<Vec<Var>>; 4] = Default::default();
        for (k, slot) in Kind::ALL.into_iter().zip(vars.iter_mut()) {
            *slot = values.values[k as usize]
                .iter()
                .map(|row| row.iter().map(|&v| tape.constant(Tensor::scalar(v))).collect())
                .collect();
        }
        CoeffVars { layers: values.layers, vars }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    fn row(&self, kind: Kind, layer: usize) -> &[Var] {
        &self.vars[kind as usize][layer - 1]
    }
}

/// Block outputs `y_T⁽ⁱ⁾`, `y_C⁽ⁱ⁾`, each written once in order.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    token: Vec<Option<Var>>,
    channel: Vec<Option<Var>>,
}

impl FeatureCache {
    /// Cache for `layers` blocks with both streams initialized to `x`.
    pub fn new(layers: usize, x: Var) -> Self {
        let mut token = vec![None; layers + 1];
        let mut channel = vec![None; layers + 1];
        token[0] = Some(x);
        channel[0] = Some(x);
        FeatureCache { token, channel }
    }

    fn put(slots: &mut [Option<Var>], i: usize, v: Var, what: &str) -> Result<()> {
        match slots.get_mut(i) {
            None => Err(Error::Sequencing(format!("{what} index {i} out of range"))),
            Some(Some(_)) => Err(Error::Sequencing(format!("{what} output {i} written twice"))),
            Some(slot) => {
                *slot = Some(v);
                Ok(())
            }
        }
    }

    fn read(slots: &[Option<Var>], i: usize, what: &str) -> Result<Var> {
        slots
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Sequencing(format!("{what} output {i} read before it was written")))
    }

    pub fn put_token(&mut self, i: usize, v: Var) -> Result<()> {
        Self::put(&mut self.token, i, v, "token")
    }

    pub fn put_channel(&mut self, i: usize, v: Var) -> Result<()> {
        Self::put(&mut self.channel, i, v, "channel")
    }

    pub fn token(&self, i: usize) -> Result<Var> {
        Self::read(&self.token, i, "token")
    }

    pub fn channel(&self, i: usize) -> Result<Var> {
        Self::read(&self.channel, i, "channel")
    }
}

fn weighted(tape: &mut Tape, coeffs: Vec<Var>, xs: Vec<Var>) -> Result<Var> {
    tape.weighted_sum(&coeffs, &xs)
}

/// `x_T⁽ℓ⁾` from cache entries `0..ℓ`.
pub fn token_input(tape: &mut Tape, layer: usize, cache: &FeatureCache, c: &CoeffVars) -> Result<Var> {
    let mut coeffs = Vec::with_capacity(2 * layer);
    let mut xs = Vec::with_capacity(2 * layer);
    for i in 0..layer {
        coeffs.push(c.row(Kind::Alpha, layer)[i]);
        xs.push(cache.token(i)?);
    }
    for i in 0..layer {
        coeffs.push(c.row(Kind::Beta, layer)[i]);
        xs.push(cache.channel(i)?);
    }
    weighted(tape, coeffs, xs)
}

/// `x_C⁽ℓ⁾`; needs `y_T⁽ℓ⁾` already in the cache.
pub fn channel_input(tape: &mut Tape, layer: usize, cache: &FeatureCache, c: &CoeffVars) -> Result<Var> {
    let mut coeffs = Vec::with_capacity(2 * layer + 1);
    let mut xs = Vec::with_capacity(2 * layer + 1);
    for i in 0..=layer {
        coeffs.push(c.row(Kind::Theta, layer)[i]);
        xs.push(cache.token(i)?);
    }
    for i in 0..layer {
        coeffs.push(c.row(Kind::Gamma, layer)[i]);
        xs.push(cache.channel(i)?);
    }
    weighted(tape, coeffs, xs)
}

/// Run `layers` blocks with weighted-averaging connections and return `y_C⁽𝓛⁾`.
///
/// `token(tape, ℓ, x)` and `channel(tape, ℓ, x)` apply block `ℓ`'s mixers; a
/// block without a channel mixer returns its input unchanged.
pub fn run_stack<T, C>(tape: &mut Tape, c: &CoeffVars, x: Var, mut token: T, mut channel: C) -> Result<Var>
where
    T: FnMut(&mut Tape, usize, Var) -> Result<Var>,
    C: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let layers = c.layers();
    let mut cache = FeatureCache::new(layers, x);
    for l in 1..=layers {
        let xt = token_input(tape, l, &cache, c)?;
        let yt = token(tape, l, xt)?;
        cache.put_token(l, yt)?;
        let xc = channel_input(tape, l, &cache, c)?;
        let yc = channel(tape, l, xc)?;
        cache.put_channel(l, yc)?;
    }
    cache.channel(layers)
}
