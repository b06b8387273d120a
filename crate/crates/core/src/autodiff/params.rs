use std::collections::BTreeMap;

use super::{Tensor, TensorError};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameters keyed by dot-separated path, iterated in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>) -> Result<(), TensorError> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(TensorError::DuplicateParam(path));
        }
        self.params.insert(path, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.params.get(path).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(path).map(|p| &mut p.value)
    }

    pub fn grad(&self, path: &str) -> Option<&Tensor<T>> {
        self.params.get(path).and_then(|p| p.grad.as_ref())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Sets every gradient to zeros of the parameter's shape.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub(crate) fn set_grad(&mut self, path: &str, grad: &[T]) -> Result<(), TensorError> {
        let p = self
            .params
            .get_mut(path)
            .ok_or_else(|| TensorError::UnknownParam(path.to_string()))?;
        p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec())?);
        Ok(())
    }

    /// Copy of the values only, without gradients.
    pub fn snapshot(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.clone(),
                            grad: None,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: None,
                        },
                    )
                })
                .collect(),
        }
    }
}
