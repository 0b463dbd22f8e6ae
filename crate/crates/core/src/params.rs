//! Named parameter arena.
//!
//! Encoders hold [`ParamId`]s rather than tensors, so two encoders that share
//! weights literally hold the same ids. Sharing is therefore identity, and a
//! shared tensor is stored (and counted) once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform matrix, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrite a parameter's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: &Tensor) -> Result<()> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::assign", slot.shape(), value.shape()));
        }
        slot.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Copy the listed parameters from `other` (same layout) into `self`.
    pub fn copy_from(&mut self, other: &ParamStore, ids: &[ParamId]) -> Result<()> {
        for &id in ids {
            self.assign(id, other.get(id))?;
        }
        Ok(())
    }
}
