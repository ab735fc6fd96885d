use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Parameter groups that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    SemanticEnc,
    SemanticDec,
    ChannelEnc,
    ChannelDec,
    AdaptorTx,
    AdaptorRx,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::SemanticEnc,
        Group::SemanticDec,
        Group::ChannelEnc,
        Group::ChannelDec,
        Group::AdaptorTx,
        Group::AdaptorRx,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::SemanticEnc => "semantic_enc",
            Group::SemanticDec => "semantic_dec",
            Group::ChannelEnc => "channel_enc",
            Group::ChannelDec => "channel_dec",
            Group::AdaptorTx => "adaptor_tx",
            Group::AdaptorRx => "adaptor_rx",
        }
    }

    pub fn of_name(name: &str) -> Option<Group> {
        let head = name.split('.').next()?;
        Group::ALL.into_iter().find(|g| g.prefix() == head)
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<T>,
}

/// Named parameters in registration order, with per-group freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
    frozen: u8,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            frozen: 0,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        let group = Group::of_name(name)
            .ok_or_else(|| Error::Validation(format!("parameter {name} has no group prefix")))?;
        if self.index.contains_key(name) {
            return Err(Error::Validation(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            tensor,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn freeze(&mut self, group: Group) {
        self.frozen |= group.bit();
    }

    pub fn unfreeze(&mut self, group: Group) {
        self.frozen &= !group.bit();
    }

    pub fn freeze_all(&mut self) {
        Group::ALL.into_iter().for_each(|g| self.freeze(g));
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen = 0;
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen & group.bit() != 0
    }

    pub fn frozen_groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.is_frozen(*g))
            .collect()
    }

    pub fn groups_present(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.entries.iter().any(|e| e.group == *g))
            .collect()
    }

    /// Registers every parameter as a graph leaf; frozen groups become
    /// constants so no gradient is computed for them.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| {
                    if self.is_frozen(e.group) {
                        g.constant(e.tensor.clone())
                    } else {
                        g.param(e.tensor.clone())
                    }
                })
                .collect(),
        }
    }

    /// Binds every parameter as a constant.
    pub fn bind_constant(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| g.constant(e.tensor.clone()))
                .collect(),
        }
    }

    /// Copies every parameter whose name also exists in `src`. Returns the
    /// number copied; a shape disagreement is an error.
    pub fn transfer_from(&mut self, src: &ParameterStore<T>) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(t) = src.get(&e.name) {
                if t.shape() != e.tensor.shape() {
                    return Err(Error::Validation(format!(
                        "shape conflict for {}: {:?} vs {:?}",
                        e.name,
                        e.tensor.shape(),
                        t.shape()
                    )));
                }
                e.tensor = t.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Flat copy of all values of one group, in registration order.
    pub fn group_values(&self, group: Group) -> Vec<T> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }

    /// Bitwise equality of parameter values (freeze flags ignored).
    pub fn values_equal(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.bits() == y.bits())
            })
    }

    /// Adds `U(-scale, scale)` to every value. Used to move away from the
    /// identity initialization in tests and diagnostics.
    pub fn perturb<R: rand::Rng + ?Sized>(&mut self, rng: &mut R, scale: f64) {
        for e in &mut self.entries {
            for v in e.tensor.data_mut() {
                *v = *v + T::lit(rng.random_range(-scale..scale));
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
            frozen: self.frozen,
        }
    }
}

/// Graph variables for one binding of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables created elsewhere, one per store entry in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
