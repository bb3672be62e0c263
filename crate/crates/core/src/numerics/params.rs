use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors. Names are dotted paths whose first segment is the
/// parameter group (`backbone.mlp1.w` belongs to group `backbone`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self.names().map(|n| group_of(n).to_string()).collect();
        groups.dedup();
        groups
    }

    /// Copy of the parameters in `group`, renamed into `target` group.
    pub fn copy_group(&self, group: &str, target: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in &self.params {
            if group_of(name) == group {
                let rest = &name[group.len()..];
                out.insert(format!("{target}{rest}"), t.clone());
            }
        }
        out
    }

    /// Keeps only the parameters whose group satisfies `keep`.
    pub fn filter_groups(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| keep(group_of(n)))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// Adds a `fan_in×fan_out` weight and `1×fan_out` bias, both uniform in
    /// `±sqrt(1/fan_in)`.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let bound = (1.0 / fan_in as f64).sqrt();
        self.insert(format!("{prefix}.w"), uniform(fan_in, fan_out, bound, rng));
        self.insert(format!("{prefix}.b"), uniform(1, fan_out, bound, rng));
    }

    /// FNV-1a over names and value bits; stable across runs and platforms.
    pub fn fingerprint(&self, group: Option<&str>) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in &self.params {
            if group.is_some_and(|g| group_of(name) != g) {
                continue;
            }
            eat(name.as_bytes());
            for bits in t.to_bits() {
                eat(&bits.to_le_bytes());
            }
        }
        h
    }
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}
