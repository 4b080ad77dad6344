//! Named parameter and buffer storage shared by every model component.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trainable.
    Weight,
    /// Non-trainable state such as running normalization statistics.
    Buffer,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Replaces a tensor, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        tensor.expect_same_shape(&self.tensors[id.0])?;
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Number of trainable scalars, optionally restricted to a name prefix.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.ids()
            .filter(|&id| self.kind(id) == ParamKind::Weight && self.name(id).starts_with(prefix))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// Copies every entry whose name starts with `prefix` from `other`.
    /// Names and shapes must match exactly.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for id in self.ids().collect::<Vec<_>>() {
            if !self.name(id).starts_with(prefix) {
                continue;
            }
            let src = other.find(self.name(id)).ok_or_else(|| {
                Error::ConfigMismatch(format!("source has no parameter {}", self.name(id)))
            })?;
            if other.get(src).shape() != self.get(id).shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} has shape {:?} in source, {:?} here",
                    self.name(id),
                    other.get(src).shape(),
                    self.get(id).shape()
                )));
            }
            self.tensors[id.0] = other.get(src).clone();
            copied += 1;
        }
        Ok(copied)
    }
}
