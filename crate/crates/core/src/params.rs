//! Named trainable tensors and their per-forward tape bindings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use routecast_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace every tensor from a named list with identical names and shapes.
    pub fn load_named(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Compat(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for ((name, t), (want, slot)) in named.iter().zip(self.names.iter().zip(&mut self.tensors)) {
            if name != want || t.shape() != slot.shape() {
                return Err(Error::Compat(format!(
                    "tensor `{name}` {:?} does not match `{want}` {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Record every tensor as a leaf; `trainable` controls gradient tracking.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }
}

/// Tape handles of a [`ParamStore`] for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

pub fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect()).expect("shape matches")
}

/// He-normal initialization for a given fan-in.
pub fn kaiming<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    normal(rng, shape, (2.0 / fan_in.max(1) as f64).sqrt())
}

/// Glorot-style initialization for linear maps.
pub fn xavier<T: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    normal(rng, &[fan_in, fan_out], (2.0 / (fan_in + fan_out).max(1) as f64).sqrt())
}
