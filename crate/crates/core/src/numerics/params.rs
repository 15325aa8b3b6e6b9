use alloc::string::String;
use alloc::vec::Vec;

use super::{Gradients, Graph, Real, Tensor, Var};
use crate::error::{bail, Result};

/// A learnable tensor together with its accumulated gradient.
///
/// Gradients accumulate across `backward` calls until [`Param::zero_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }

    pub fn accumulate(&mut self, grad: &[T]) {
        for (g, &d) in self.grad.data_mut().iter_mut().zip(grad) {
            *g = *g + d;
        }
    }
}

/// Ordered, named parameters of one model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<(String, Param<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    /// Appends a parameter and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.entries.push((name.into(), Param::new(value)));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Param<T> {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Param<T> {
        &mut self.entries[slot].1
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    /// Number of scalar values over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Creates one graph leaf per parameter, tracked when `train` is set.
    pub fn bind(&self, g: &mut Graph<T>, train: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, p)| if train { g.param(p) } else { g.constant(p.value.clone()) })
            .collect()
    }

    /// Adds the gradients of `vars` (as returned by [`ParamStore::bind`]).
    pub fn accumulate(&mut self, grads: &Gradients<T>, vars: &[Var]) {
        for ((_, p), &v) in self.entries.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                p.accumulate(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.entries {
            p.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.entries.iter_mut().map(|(_, p)| p).collect()
    }

    /// Replaces the value of the named parameter, keeping its shape.
    pub fn load(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let Some(slot) = self.find(name) else { bail!(Data, "unknown parameter {name}") };
        let p = &mut self.entries[slot].1;
        if p.value.shape() != value.shape() {
            bail!(Dimension, "parameter {name}: expected {:?}, got {:?}", p.value.shape(), value.shape());
        }
        *p = Param::new(value);
        Ok(())
    }
}
