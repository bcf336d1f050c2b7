//! Named parameter storage, parameter groups, and gradient buffers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which training stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// U-Net convolutions, time and global-text embedding.
    Backbone,
    /// Instance mask-and-text guidance blocks and the toy text encoder.
    Guidance,
    /// Grayscale condition encoder and the pixel-level masked cross-attention.
    Condition,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Backbone, ParamGroup::Guidance, ParamGroup::Condition];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Guidance => "guidance",
            ParamGroup::Condition => "condition",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), trainable: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name, which is a model
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        assert!(self.index.insert(name.clone(), id).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, group, value });
        self.trainable.push(true);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for (flag, p) in self.trainable.iter_mut().zip(&self.params) {
            *flag = groups.contains(&p.group);
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> =
            self.iter().filter(|(id, _)| self.is_trainable(*id)).map(|(_, p)| p.group).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Same names, groups and trainability with converted element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group, value: p.value.cast() })
                .collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values from `other`, matching by name; shapes must agree.
    pub fn load_values(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, value) in other {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: model {:?}, file {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(len: usize) -> Self {
        Self { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `other` into `self`, parameter by parameter in index order.
    pub fn merge(&mut self, other: &Self) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
