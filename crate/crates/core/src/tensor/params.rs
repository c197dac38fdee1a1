use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, Tensor};
use crate::error::{cfg_err, dim_err, Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Parameter initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
}

/// Named parameters, ordered by path.
#[derive(Clone, Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
    seed: u64,
    rng: ChaCha8Rng,
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        [o, i, rest @ ..] => {
            let r: usize = rest.iter().product();
            (i * r, o * r)
        }
        [] => (1, 1),
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a new parameter. Values are drawn from the store's RNG in
    /// registration order, so equal seeds and equal call sequences give
    /// identical stores.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(cfg_err!("parameter {} registered twice", name));
        }
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Constant(c) => t.data_mut().iter_mut().for_each(|v| *v = c),
            Init::GlorotUniform => {
                let (fi, fo) = fans(shape);
                let limit = (6.0 / (fi + fo) as f64).sqrt();
                for v in t.data_mut() {
                    *v = self.rng.gen_range(-limit..=limit);
                }
            }
        }
        self.params.insert(name.to_string(), Arc::new(t));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| cfg_err!("unknown parameter {}", name))
    }

    pub(crate) fn get_shared(&self, name: &str) -> Result<Arc<Tensor>> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| cfg_err!("unknown parameter {}", name))
    }

    /// Replaces the values of an existing parameter; the shape may not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| cfg_err!("unknown parameter {}", name))?;
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, new value has {:?}",
                name,
                slot.shape(),
                value.shape()
            ));
        }
        *slot = Arc::new(value);
        Ok(())
    }

    pub(crate) fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| cfg_err!("unknown parameter {}", name))?;
        Ok(Arc::make_mut(slot).data_mut())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Sets every parameter value to `value`.
    pub fn fill(&mut self, value: f64) {
        for t in self.params.values_mut() {
            Arc::make_mut(t).data_mut().iter_mut().for_each(|v| *v = value);
        }
    }

    /// Parameters whose path starts with `prefix`, with the prefix kept.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            seed: self.seed,
            rng: self.rng.clone(),
        }
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// On-disk parameter snapshot: a single JSON document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub step: u64,
    params: BTreeMap<String, StoredTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
    /// Free-form description of what the parameters belong to.
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(store: &ParamStore, step: u64, optimizer: Option<AdamState>, meta: serde_json::Value) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            seed: store.seed,
            step,
            params: store
                .iter()
                .map(|(k, t)| {
                    (
                        k.to_string(),
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            values: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
            optimizer,
            meta,
        }
    }

    /// Rebuilds the parameter store. The RNG is re-seeded from the stored seed.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new(self.seed);
        for (k, st) in &self.params {
            let t = Tensor::new(st.shape.clone(), st.values.clone())?;
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter {} holds non-finite values", k)));
            }
            store.params.insert(k.clone(), Arc::new(t));
        }
        Ok(store)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
            return Err(Error::Format(format!(
                "checkpoint format_version {:?}, expected {}",
                version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path.as_ref(), text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new(0);
        s.add("a", &[2, 2], Init::Zeros).unwrap();
        assert!(s.add("a", &[2, 2], Init::Zeros).is_err());
    }

    #[test]
    fn shapes_are_fixed() {
        let mut s = ParamStore::new(0);
        s.add("a", &[2, 2], Init::Zeros).unwrap();
        assert!(s.set("a", Tensor::zeros(&[4])).is_err());
        assert!(s.set("a", Tensor::full(&[2, 2], 1.0)).is_ok());
    }

    #[test]
    fn glorot_respects_limit_and_seed() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        a.add("w", &[10, 20], Init::GlorotUniform).unwrap();
        b.add("w", &[10, 20], Init::GlorotUniform).unwrap();
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= limit));
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut s = ParamStore::new(11);
        s.add("x/w", &[3, 2], Init::GlorotUniform).unwrap();
        s.add("x/b", &[2], Init::Zeros).unwrap();
        let ck = Checkpoint::new(&s, 42, None, serde_json::json!({"kind": "test"}));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.to_store().unwrap().digest(), s.digest());
    }

    #[test]
    fn checkpoint_version_checked() {
        let text = r#"{"format_version": 99, "seed": 0, "step": 0, "params": {}}"#;
        assert!(matches!(Checkpoint::from_json(text), Err(Error::Format(_))));
    }
}
