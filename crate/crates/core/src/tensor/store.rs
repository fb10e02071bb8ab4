//! Named-tensor persistence for checkpoints.
//!
//! A flat JSON map `name -> (shape, data)` with a version field. JSON f64
//! round-trips are exact (shortest-representation encoding), so save/load
//! is bit-exact for the f64 storage this engine uses.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorStore {
    pub version: u32,
    pub entries: BTreeMap<String, StoredTensor>,
}

impl Default for TensorStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TensorStore {
    pub fn new() -> Self {
        TensorStore {
            version: STORE_VERSION,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.entries.insert(
            name.into(),
            StoredTensor {
                shape: tensor.shape().to_vec(),
                data: tensor.values(),
            },
        );
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.entries.insert(name.into(), StoredTensor { shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&StoredTensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint is missing tensor '{name}'")))
    }

    /// Materialize a stored tensor as a trainable parameter.
    pub fn get_param(&self, name: &str) -> Result<Tensor> {
        let st = self.get(name)?;
        Tensor::param_from_vec(st.shape.clone(), st.data.clone())
    }

    /// Copy stored values into an existing tensor of the same shape.
    pub fn load_into(&self, name: &str, tensor: &Tensor) -> Result<()> {
        let st = self.get(name)?;
        if st.shape != tensor.shape() {
            return Err(Error::Shape(format!(
                "stored '{name}' has shape {:?}, expected {:?}",
                st.shape,
                tensor.shape()
            )));
        }
        tensor.set_values(&st.data);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let w = BufWriter::new(file);
        serde_json::to_writer(w, self).map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TensorStore> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let r = BufReader::new(file);
        let store: TensorStore =
            serde_json::from_reader(r).map_err(|e| Error::MalformedInput {
                line: 0,
                message: format!("{}: {e}", path.display()),
            })?;
        if store.version != STORE_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {})",
                store.version, STORE_VERSION
            )));
        }
        Ok(store)
    }
}
