//! Named trainable parameters with gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// One trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of parameters, addressable by name.
///
/// Insertion order is stable and defines checkpoint layout, so two models
/// built the same way match element for element.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter; names must be unique within the set.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter { name: name.to_string(), value, grad });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = self.index_of(name)?;
        Some(&mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

/// Glorot uniform initialization: samples from
/// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::from_vec(shape, data).expect("length computed from shape")
}
