//! Named learnable parameters.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors. Insertion order is the
/// iteration order; names are dotted paths such as `encoder.stage0.block1.attn.qkv.weight`.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.ids().map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    /// Adds one gradient buffer per parameter, in parameter order.
    pub fn accumulate(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(Error::Dimension(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if t.requires_grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, on: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                let taken = std::mem::replace(t, Tensor::zeros(&[1]));
                *t = taken.with_requires_grad(on);
            }
        }
    }

    /// Overwrites values of parameters that also appear in `entries`.
    /// Returns how many were copied. A name match with a different shape is an error.
    pub fn load_matching<'a>(&mut self, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in entries {
            if let Some(id) = self.id(name) {
                let dst = &mut self.tensors[id.0];
                if dst.shape() != src.shape() {
                    return Err(Error::Compatibility(format!(
                        "parameter {name}: shape {:?} vs stored {:?}",
                        dst.shape(),
                        src.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Deterministic parameter factory used while building a model.
pub struct ParamBuilder<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamBuilder<'_> {
    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.add(name, Tensor::new(shape, data)?)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.params.add(name, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.params.add(name, Tensor::full(shape, v))
    }
}
