//! Flat parameter storage shared by models, the optimizer and checkpoints.
//!
//! Components hold [`ParamId`] handles into a [`ParamSet`]; the set owns the
//! tensors. Binding a parameter onto a graph records the (id, var) pair so
//! the optimizer can route gradients back after `backward`.

use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Non-trainable entries (e.g. BatchNorm running statistics) are carried
    /// in checkpoints but skipped by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Param { name: name.into(), value, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn insert_state(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Param { name: name.into(), value, trainable: false });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars, the quantity model parameter counts use.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replace a tensor by name, verifying the shape. Used by checkpoint load.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<(), String> {
        match self.entries.iter_mut().find(|p| p.name == name) {
            Some(p) if p.value.shape() == value.shape() => {
                p.value = value;
                Ok(())
            }
            Some(p) => Err(format!(
                "shape mismatch for '{name}': {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )),
            None => Err(format!("unknown parameter '{name}'")),
        }
    }
}

/// Parameter-to-graph bindings recorded during one forward pass.
#[derive(Default)]
pub struct Bindings {
    entries: Vec<(ParamId, Var)>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert `id`'s current value as a leaf and record the association.
    pub fn bind(&mut self, g: &mut Graph, set: &ParamSet, id: ParamId) -> Var {
        let var = g.leaf(set.get(id));
        self.entries.push((id, var));
        var
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.entries.iter().copied()
    }
}
