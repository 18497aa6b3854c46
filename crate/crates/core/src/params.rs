//! Flat registry of named parameters and buffers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ReplError, Result};
use crate::tensor::{ParamId, Tensor};

/// What a registry entry is, used for optimizer decay rules and counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Conv kernels, linear weights, embeddings.
    Weight,
    /// Linear biases.
    Bias,
    /// BN/LN scale and shift.
    NormAffine,
    /// Synthesis coefficients of a computing layer.
    Coeff,
    /// Running statistics; never trained.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Tensor,
    pub kind: ParamKind,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<ParamId, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, value: Tensor, kind: ParamKind) {
        let trainable = kind != ParamKind::Buffer;
        self.entries.insert(
            id,
            Entry {
                value,
                kind,
                trainable,
            },
        );
    }

    pub fn insert_frozen(&mut self, id: ParamId, value: Tensor, kind: ParamKind) {
        self.entries.insert(
            id,
            Entry {
                value,
                kind,
                trainable: false,
            },
        );
    }

    pub fn get(&self, id: &ParamId) -> Result<&Tensor> {
        self.entries
            .get(id)
            .map(|e| &e.value)
            .ok_or_else(|| ReplError::UnknownParam(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &ParamId) -> Result<&mut Tensor> {
        self.entries
            .get_mut(id)
            .map(|e| &mut e.value)
            .ok_or_else(|| ReplError::UnknownParam(id.to_string()))
    }

    pub fn entry(&self, id: &ParamId) -> Option<&Entry> {
        self.entries.get(id)
    }

    pub fn set(&mut self, id: &ParamId, value: Tensor) -> Result<()> {
        let slot = self.get_mut(id)?;
        if slot.shape() != value.shape() {
            return Err(ReplError::shape(
                "ParamStore::set",
                "parameter shape",
                format!("{id}: {:?} vs {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn is_trainable(&self, id: &ParamId) -> bool {
        self.entries.get(id).is_some_and(|e| e.trainable)
    }

    pub fn remove(&mut self, id: &ParamId) -> Option<Entry> {
        self.entries.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Entry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut Entry)> {
        self.entries.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&ParamId, &Entry)> {
        self.entries.iter().filter(|(_, e)| e.trainable)
    }

    /// Scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, e)| e.value.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Moves every entry of `other` in, overwriting on collision.
    pub fn absorb(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }
}
