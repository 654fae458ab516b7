//! Learnable-scalar counts grouped by parameter-name prefix.

use std::collections::BTreeMap;

use serde::Serialize;
use ssmixer_core::{ParamStore, SplitMix64};

use crate::error::Result;
use crate::experiment::{Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub module: String,
    pub tensors: usize,
    pub scalars: usize,
}

/// Group by the first `depth` dot-separated name segments, in name order.
pub fn breakdown(store: &ParamStore, depth: usize) -> Vec<AuditRow> {
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (name, t) in store.iter() {
        let key = name.split('.').take(depth.max(1)).collect::<Vec<_>>().join(".");
        let g = groups.entry(key).or_default();
        g.0 += 1;
        g.1 += t.len();
    }
    groups.into_iter().map(|(module, (tensors, scalars))| AuditRow { module, tensors, scalars }).collect()
}

/// Build `config` and return its breakdown plus the total.
pub fn audit(config: &ModelConfig, depth: usize) -> Result<(Vec<AuditRow>, usize)> {
    let mut store = ParamStore::new();
    Model::build(config, &mut store, &mut SplitMix64::new(0))?;
    Ok((breakdown(&store, depth), store.num_scalars()))
}
