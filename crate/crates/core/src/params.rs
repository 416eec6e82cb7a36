//! Named parameter storage and the checkpoint file format.
//!
//! Parameter names follow `stage{t}.{branch}.{layer}.{weight|bias}`, for
//! example `stage1.x.conv3.weight`, `stage2.J.conv5.bias`,
//! `stage4.B.deconv.weight` or `stage6.R.fc.weight`. Image feature
//! extractors shared across stages are registered under the first stage
//! that uses them (`stage1.x.*`, `stage2.xp.*`).

use std::path::Path;

use humansense_autodiff::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_FORMAT: &str = "humansense-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Replaces an existing parameter, keeping its position.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Config(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.iter() {
            match other.get(name) {
                None => return Err(Error::Config(format!("parameter {name} missing from checkpoint"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Config(format!(
                        "parameter {name}: checkpoint shape {:?}, model expects {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(Error::Config(format!("checkpoint has unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn to_entries(&self) -> Vec<ParamEntry> {
        self.iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.to_vec(),
            })
            .collect()
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut store = Self::new();
        for e in entries {
            let t = Tensor::new(e.shape, e.values)?;
            if store.params.insert(e.name.clone(), t).is_some() {
                return Err(Error::Data(format!("duplicate parameter {}", e.name)));
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

/// On-disk checkpoint: parameters plus optional optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub epochs_completed: usize,
    pub global_step: u64,
    pub velocity: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(params: &ParamStore, optimizer: Option<OptimizerState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            params: params.to_entries(),
            optimizer,
        }
    }

    pub fn params(&self) -> Result<ParamStore> {
        ParamStore::from_entries(self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e))?;
        io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("not a checkpoint (format {:?})", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("stage1.J.conv1.weight", Tensor::from_fn([2, 3], |i| (i as f64).sin() / 3.0));
        s.insert("stage1.J.conv1.bias", Tensor::new([2], vec![0.1, -1e-300]).unwrap());
        s
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let s = store();
        Checkpoint::new(&s, None).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().params().unwrap();
        let names: Vec<_> = back.names().collect();
        assert_eq!(names, vec!["stage1.J.conv1.weight", "stage1.J.conv1.bias"]);
        for (name, t) in s.iter() {
            let b = back.get(name).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(b));
        }
    }

    #[test]
    fn compatibility_check_reports_shape_mismatch() {
        let s = store();
        let mut other = store();
        other.params.insert("stage1.J.conv1.bias".into(), Tensor::zeros([3]));
        assert!(s.check_compatible(&other).is_err());
        assert!(s.check_compatible(&store()).is_ok());
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut s = store();
        assert!(s.set("stage1.J.conv1.bias", Tensor::zeros([3])).is_err());
        assert!(s.set("nope", Tensor::zeros([1])).is_err());
    }
}
