use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::DenseArray;

/// Version tag written into every checkpoint.
pub const CHECKPOINT_VERSION: &str = "exnode-ckpt-v1";

/// Named trainable arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, DenseArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(DenseArray::len).sum()
    }

    /// Adds every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(Error::InvalidArgument(format!("duplicate parameter `{k}`")));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut Rng) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = DenseArray::from_fn(shape, |_| rng.uniform_range(-bound, bound));
        self.insert(name, value);
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, DenseArray::zeros(shape));
    }

    /// Flattens every parameter in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for v in self.params.values() {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a store of the same layout.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ParamStore> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, store needs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut out = ParamStore::new();
        let mut offset = 0;
        for (k, v) in &self.params {
            let len = v.len();
            out.insert(
                k.clone(),
                DenseArray::from_parts(v.shape().to_vec(), flat[offset..offset + len].to_vec()),
            );
            offset += len;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        if self.params.len() != other.params.len() {
            return f64::INFINITY;
        }
        self.params
            .iter()
            .map(|(k, v)| other.get(k).map_or(f64::INFINITY, |o| v.max_abs_diff(o)))
            .fold(0.0, f64::max)
    }

    pub fn to_checkpoint(&self, model: Option<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION.to_string(),
            model,
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        ParamEntry {
                            shape: v.shape().to_vec(),
                            data: v.data().to_vec(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk parameter checkpoint: name to shape plus flat values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: String,
    /// Model description needed to rebuild the network around the weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<serde_json::Value>,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    pub fn into_store(self) -> Result<ParamStore> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version `{}`, expected `{CHECKPOINT_VERSION}`",
                self.version
            )));
        }
        let mut store = ParamStore::new();
        for (name, entry) in self.params {
            let arr = DenseArray::new(entry.shape, entry.data)
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            store.insert(name, arr);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
