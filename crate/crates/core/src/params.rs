//! Named parameter storage shared by the encoder and the flow.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order. The order is part of the checkpoint
/// format and of the optimizer state layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        Bound {
            tape,
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(v.clone(), requires_grad))
                .collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T: Scalar> {
    tape: &'t Tape<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn tape(&self) -> &Tape<T> {
        self.tape
    }

    /// Gradient for every parameter, in store order.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// He-normal initialization scaled by `gain`, for a conv kernel
/// `(cout, cin, kh, kw)`.
pub fn kaiming_normal<T: Scalar>(shape: &[usize], gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}
