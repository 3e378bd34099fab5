use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::DenseArray;
use crate::error::{Error, Result};

/// Named parameter arrays, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, DenseArray>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodedArray {
    shape: Vec<usize>,
    data_b64: String,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(DenseArray::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), DenseArray::zeros(v.shape())))
                .collect(),
        }
    }

    /// Adds every entry of `other`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn ensure_same_layout(&self, other: &ParamStore) -> Result<()> {
        for (k, v) in &other.params {
            let mine = self.params.get(k).ok_or_else(|| Error::UnknownParam(k.clone()))?;
            if mine.shape() != v.shape() {
                return Err(Error::shape("param_layout", mine.shape(), v.shape()));
            }
        }
        if let Some(missing) = self.params.keys().find(|k| !other.params.contains_key(*k)) {
            return Err(Error::invalid(format!("parameter `{missing}` is missing")));
        }
        Ok(())
    }

    /// Serializes to the checkpoint document: `{name: {shape, data_b64}}` with
    /// little-endian `f64` payloads.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&String, EncodedArray> = self
            .params
            .iter()
            .map(|(k, v)| {
                let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
                (
                    k,
                    EncodedArray {
                        shape: v.shape().to_vec(),
                        data_b64: B64.encode(bytes),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("checkpoint maps always serialize")
    }

    /// Decodes a checkpoint without a layout template.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let map: BTreeMap<String, EncodedArray> = serde_json::from_value(value.clone())
            .map_err(|e| Error::invalid(format!("malformed checkpoint: {e}")))?;
        let mut out = ParamStore::new();
        for (name, enc) in map {
            let bytes = B64
                .decode(enc.data_b64.as_bytes())
                .map_err(|e| Error::invalid(format!("`{name}`: bad base64 payload: {e}")))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::invalid(format!("`{name}`: payload is not a whole number of f64")));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(name, DenseArray::new(enc.shape, data)?)?;
        }
        Ok(out)
    }

    /// Decodes a checkpoint and checks it against an expected layout:
    /// unknown names, missing names and shape mismatches are rejected.
    pub fn from_json_checked(value: &serde_json::Value, template: &ParamStore) -> Result<Self> {
        let loaded = Self::from_json(value)?;
        template.ensure_same_layout(&loaded)?;
        Ok(loaded)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json()).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_json(&value)
    }

    pub fn load_checked(path: &Path, template: &ParamStore) -> Result<Self> {
        let loaded = Self::load(path)?;
        template.ensure_same_layout(&loaded)?;
        Ok(loaded)
    }
}
