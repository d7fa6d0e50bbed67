use std::collections::BTreeMap;

use super::Tensor2;
use crate::error::{Error, Result};

/// A named parameter together with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Named parameters, each with a gradient slot of identical shape.
///
/// Names are unique. Iteration order is the lexicographic order of names,
/// which keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor2> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor2> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    /// Replaces a parameter value, keeping the shape fixed.
    pub fn set(&mut self, name: &str, value: Tensor2) -> Result<()> {
        let slot = self.value_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "ParamStore::set",
                left: slot.shape(),
                right: value.shape(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor2> {
        self.params.get(name).map(|p| &p.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds `grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in &grads.by_name {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "ParamStore::accumulate",
                    left: p.grad.shape(),
                    right: g.shape(),
                });
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub(crate) by_name: BTreeMap<String, Tensor2>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Additive reduction of gradients from independent tapes.
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.by_name {
            match self.by_name.get_mut(&name) {
                Some(slot) => slot.add_assign(&g),
                None => {
                    self.by_name.insert(name, g);
                }
            }
        }
    }
}
