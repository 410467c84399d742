use std::collections::BTreeMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    value: Tensor<T>,
    gradient: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let gradient = Tensor::zeros(value.shape().to_vec());
        Self {
            name: name.into(),
            value,
            gradient,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn gradient(&self) -> &Tensor<T> {
        &self.gradient
    }

    /// Replaces the value; the gradient keeps its shape only if the new value does.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::dim(
                "set_value",
                format!(
                    "parameter {} has shape {:?}, got {:?}",
                    self.name,
                    self.value.shape(),
                    value.shape()
                ),
            ));
        }
        self.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    /// Value and gradient slices, for optimizer updates.
    pub fn value_and_grad_mut(&mut self) -> (&mut [T], &[T]) {
        (self.value.data_mut(), self.gradient.data())
    }

    pub fn accumulate(&mut self, grad: &Tensor<T>) -> Result<()> {
        if grad.shape() != self.gradient.shape() {
            return Err(Error::dim(
                "accumulate",
                format!(
                    "gradient {:?} for parameter {} of shape {:?}",
                    grad.shape(),
                    self.name,
                    self.value.shape()
                ),
            ));
        }
        for (g, &d) in self.gradient.data_mut().iter_mut().zip(grad.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.gradient.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Flat registry of named parameters. Names are hierarchical
/// (`"transformer.enc_sa.w_q"`) and unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.params[id.0].value()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value().len()).sum()
    }

    /// Converts every parameter to another element type, keeping ids and names.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.register(p.name.clone(), p.value().cast());
        }
        out
    }
}
