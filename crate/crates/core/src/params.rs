use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named learnable tensors, keyed by layer path such as
/// `encoder.level2.res1.branch.conv1.w`. Iteration is in name order.
#[derive(Clone, Debug, Default)]
pub struct ModelParams<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copy whose tensors do not track gradients (for inference).
    pub fn detached(&self) -> Self {
        self.map(|_, t| t.detach())
    }

    /// Copy whose tensors are fresh gradient-tracking leaves.
    pub fn trainable(&self) -> Self {
        self.map(|_, t| t.detach_with_grad(true))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(k, v))).collect(),
        }
    }

    pub fn zero_grads(&self) {
        self.tensors.values().for_each(Tensor::zero_grad);
    }

    /// Replaces the named tensor's values, keeping its shape and grad flag.
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let old = self.get(name)?;
        let t = Tensor::leaf(data, old.shape(), old.requires_grad())?;
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }
}

/// Parameter registration with deterministic initialization.
pub(crate) struct Registrar<'a, T: Scalar> {
    pub store: &'a mut ModelParams<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Registrar<'_, T> {
    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                T::of(if bound > 0.0 {
                    self.rng.random_range(-bound..bound)
                } else {
                    0.0
                })
            })
            .collect();
        let t = Tensor::param(data, shape).expect("registered shapes are non-empty");
        self.store.insert(name, t.clone());
        t
    }

    pub fn constant(&mut self, name: String, shape: &[usize], v: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let t = Tensor::param(vec![T::of(v); n], shape).expect("registered shapes are non-empty");
        self.store.insert(name, t.clone());
        t
    }
}
