use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform matrix.
    pub fn add_linear<R: Rng + ?Sized>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> (ParamId, ParamId) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        let w = self.add(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, data).expect("shape"));
        let b = self.add(format!("{name}.b"), Tensor::zeros(1, fan_out));
        (w, b)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Overwrite values from named tensors; every parameter must be present with its shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    "load_named",
                    format!("{name}: checkpoint {:?}, model {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = (*t).clone();
        }
        Ok(())
    }

    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }
}
