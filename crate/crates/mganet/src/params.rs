//! Named, shaped parameter collection plus the tape binding used by
//! forward passes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// All learnable tensors of a network, keyed by stable names. Iteration
/// order (BTreeMap) is part of the determinism contract: optimizer updates
/// and checkpoint payloads follow it.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NetworkParams<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn new() -> Self {
        NetworkParams { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Lazily binds named parameters onto a tape, one leaf per name.
pub struct Binder<'p, T: Scalar> {
    params: &'p NetworkParams<T>,
    trainable: bool,
    ids: BTreeMap<String, NodeId>,
}

impl<'p, T: Scalar> Binder<'p, T> {
    pub fn new(params: &'p NetworkParams<T>, trainable: bool) -> Self {
        Binder { params, trainable, ids: BTreeMap::new() }
    }

    /// Node id for a parameter, inserting the leaf on first use.
    pub fn node(&mut self, tape: &mut Tape<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let tensor = self.params.get(name)?.clone();
        let id = tape.leaf(tensor, self.trainable);
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Pins a name to an existing node instead of the stored tensor (used by
    /// gradient checks that differentiate w.r.t. a single parameter).
    pub fn override_node(&mut self, name: &str, id: NodeId) {
        self.ids.insert(name.to_string(), id);
    }

    /// Gradient per bound parameter name; parameters that never reached the
    /// loss report zeros.
    pub fn collect_grads(&self, tape: &Tape<T>, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.ids
            .iter()
            .map(|(name, &id)| (name.clone(), grads.wrt_or_zeros(id, tape)))
            .collect()
    }

    /// Like [`Binder::collect_grads`], but drops parameters that never
    /// reached the loss instead of densifying them to zeros. The optimizer
    /// uses this so a head that took no part in the objective keeps its
    /// moment state untouched. Gradients are moved out of the sweep, not
    /// copied.
    pub fn collect_reached_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.ids
            .iter()
            .filter_map(|(name, &id)| grads.take(id).map(|g| (name.clone(), g)))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.ids.keys()
    }
}
