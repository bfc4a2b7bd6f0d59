use std::collections::BTreeMap;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is the serialization order, so two stores built by the
/// same constructor always checkpoint identically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate param {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| g * g)
            .sum::<T>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * s);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
        }
    }

    /// Snapshot of all values keyed by name.
    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from a named map. Every parameter must be present
    /// with a matching shape; extra entries are ignored.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let t = named
                .get(&p.name)
                .ok_or_else(|| Error::State(format!("checkpoint is missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(dim_err!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
