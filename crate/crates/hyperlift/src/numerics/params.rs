//! Named trainable parameters and the ordered registry models hang them on.

use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::tensor::{NumericsError, Result, Tensor};

/// A trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered, name-indexed parameter registry. Registration order is the
/// canonical order used for leasing onto tapes and for optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParam { name });
        }
        let grad = Tensor::zeros(value.shape());
        let idx = self.items.len();
        self.by_name.insert(name.clone(), idx);
        self.items.push(Parameter { name, value, grad });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.items[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.items[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        self.index_of(name)
            .map(|i| &self.items[i])
            .ok_or_else(|| NumericsError::UnknownParam { name: name.into() })
    }

    /// Overwrite a parameter value; the shape must match the registered one.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| NumericsError::UnknownParam { name: name.into() })?;
        if self.items[idx].value.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_value",
                left: self.items[idx].value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.items[idx].value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.items.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.items {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|p| p.value.len()).sum()
    }

    /// Lease every parameter onto a tape, in registration order.
    pub fn lease(&self, tape: &mut Tape) -> Vec<Var> {
        self.items
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Checkpoint view: name -> value.
    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.items
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Restore values from a checkpoint map. Names and shapes must match the
    /// registry exactly, in both directions.
    pub fn load_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in map.keys() {
            if self.index_of(name).is_none() {
                return Err(NumericsError::UnknownParam { name: name.clone() });
            }
        }
        for i in 0..self.items.len() {
            let name = self.items[i].name.clone();
            let value = map
                .get(&name)
                .ok_or(NumericsError::UnknownParam { name: name.clone() })?;
            self.set_value(&name, value.clone())?;
        }
        Ok(())
    }
}
