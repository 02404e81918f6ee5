//! Named trainable parameters with paired gradient accumulators.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// One trainable tensor and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered map from hierarchical parameter names (e.g. `proc0/Wz`) to
/// value/gradient pairs. Iteration follows insertion order, which keeps
/// seeded runs reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter; the gradient accumulator starts at zero.
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<usize> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter: {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        let (slot, _) = self.entries.insert_full(name.to_string(), ParamEntry { value, grad });
        Ok(slot)
    }

    pub fn slot(&self, name: &str) -> Result<usize> {
        self.entries
            .get_index_of(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter: {name}")))
    }

    pub fn name(&self, slot: usize) -> &str {
        self.entries.get_index(slot).expect("valid slot").0
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.entries.get_index(slot).expect("valid slot").1.value
    }

    pub fn value_by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.slot(name)?))
    }

    pub fn grad(&self, slot: usize) -> &Tensor {
        &self.entries.get_index(slot).expect("valid slot").1.grad
    }

    pub fn entry_mut(&mut self, slot: usize) -> &mut ParamEntry {
        self.entries.get_index_mut(slot).expect("valid slot").1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// Add `delta` into the gradient accumulator of `slot`.
    pub fn accumulate_grad(&mut self, slot: usize, delta: &Tensor) -> Result<()> {
        let entry = self.entry_mut(slot);
        if entry.grad.shape() != delta.shape() {
            return Err(Error::dim("accumulate_grad", entry.grad.shape(), delta.shape()));
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }
}
