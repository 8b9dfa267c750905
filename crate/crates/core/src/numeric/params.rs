use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data: Vec<T> = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![T::from_f64_lossy(value); n])?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        self.id(name).map(|id| self.get(id)).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Marks every parameter whose name starts with `prefix` as (not) requiring gradients.
    pub fn set_requires_grad_prefix(&mut self, prefix: &str, flag: bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if name.starts_with(prefix) {
                t.set_requires_grad(flag);
            }
        }
    }

    /// Copies values `src_prefix + suffix` from `other` into `dst_prefix + suffix`
    /// for every destination parameter under `dst_prefix`. Shapes must match.
    pub fn copy_from(&mut self, other: &ParamStore<T>, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.tensors.len() {
            let Some(suffix) = self.names[i].strip_prefix(dst_prefix) else { continue };
            let src_name = format!("{src_prefix}{suffix}");
            let src = other.by_name(&src_name)?;
            let dst = &mut self.tensors[i];
            if src.shape() != dst.shape() {
                return Err(Error::ParamMismatch {
                    name: self.names[i].clone(),
                    expected: dst.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
            copied += 1;
        }
        Ok(copied)
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let tensors = self.tensors.iter().map(|t| {
            let mut c: Tensor<U> = t.cast();
            c.set_requires_grad(t.requires_grad());
            c
        });
        ParamStore { names: self.names.clone(), tensors: tensors.collect(), index: self.index.clone() }
    }

    /// Bitwise equality of all values (names and shapes included).
    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
