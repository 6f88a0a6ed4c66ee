use serde::{Deserialize, Serialize};

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which optimizer (if any) owns a tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// First-layer filters: sinc band edges or `Conv0` kernels.
    Frontend,
    /// Ordinary network weights.
    Network,
    /// Architecture logits (one table per cell kind).
    Architecture,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Ordered registry of every tensor a model owns. Registration order is the
/// serialization order and the optimizer visiting order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: Tensor,
    ) -> ParamId {
        let mut tensor = tensor;
        tensor.set_requires_grad(group != ParamGroup::Buffer);
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].group == group)
            .collect()
    }

    /// Learnable tensors of a group, i.e. those that still require a gradient.
    pub fn trainable_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| {
                let e = &self.entries[id.0];
                e.group == group && e.tensor.requires_grad()
            })
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Freezes or unfreezes every tensor of a group.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.tensor.set_requires_grad(trainable);
        }
    }

    /// Number of learnable scalars.
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn count_matching(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tensor.requires_grad() && pred(e))
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds the gradients the tape computed for bound parameters into the store.
    pub fn accumulate_grads(&mut self, graph: &Graph) -> Result<()> {
        for (id, g) in graph.param_grads() {
            self.get_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Writes running statistics recorded during a training-mode forward pass.
    pub fn apply_buffer_updates(&mut self, graph: &mut Graph) -> Result<()> {
        for (id, data) in graph.take_buffer_updates() {
            let t = self.get_mut(id);
            if t.numel() != data.len() {
                return Err(Error::shape("buffer update length mismatch"));
            }
            t.data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    /// Copies values from `other` for every entry with the same name and shape.
    /// Returns the number of tensors copied.
    pub fn copy_matching_from(
        &mut self,
        other: &ParamStore,
        pred: impl Fn(&ParamEntry) -> bool,
    ) -> Result<usize> {
        let mut copied = 0;
        for e in self.entries.iter_mut().filter(|e| pred(e)) {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| {
                    Error::invalid(format!("no tensor named {} to copy from", e.name))
                })?;
            if src.tensor.shape() != e.tensor.shape() {
                return Err(Error::shape(format!(
                    "{}: shape {:?} vs {:?}",
                    e.name,
                    src.tensor.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor.data_mut().copy_from_slice(src.tensor.data());
            copied += 1;
        }
        Ok(copied)
    }

    /// Replaces all values with those of a structurally identical store.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match stored {} {:?}",
                    dst.name,
                    dst.tensor.shape(),
                    src.name,
                    src.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
            dst.tensor.set_requires_grad(src.tensor.requires_grad());
        }
        Ok(())
    }
}
