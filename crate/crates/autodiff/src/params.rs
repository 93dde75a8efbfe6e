use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{Real, Tensor};
use crate::TensorError;

/// Named parameter tensors, ordered by name.
///
/// Values are reference counted so binding them into a [`crate::Graph`] is
/// free; updates copy-on-write once no graph holds them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<(), TensorError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(name, Arc::new(value));
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn get_arc(&self, name: &str) -> Option<Arc<Tensor<T>>> {
        self.params.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast::<U>())))
                .collect(),
        }
    }

    /// Parameters whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Merge `other` into `self`, failing on name collisions.
    pub fn extend(&mut self, other: &Self) -> Result<(), TensorError> {
        for (k, v) in &other.params {
            if self.params.contains_key(k) {
                return Err(TensorError::DuplicateParam(k.clone()));
            }
            self.params.insert(k.clone(), v.clone());
        }
        Ok(())
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Uniform in `±1/sqrt(fan_in)`, the usual default for linear and conv weights.
    pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::rand_uniform(shape, -bound, bound, rng)
    }

    pub fn normal<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
        let mut t = Tensor::randn(shape, rng);
        t.scale_inplace(T::lit(std));
        t
    }
}
