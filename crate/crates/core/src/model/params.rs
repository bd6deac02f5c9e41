use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

/// A plain named array: shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
}

impl<R: Real> Array<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![R::zero(); shape.iter().product()],
        }
    }
}

/// Graph-side view of a parameter set.
pub type TensorMap<R> = BTreeMap<String, Tensor<R>>;

/// Ordered collection of named arrays (the trainable meta-parameters θ,
/// optimizer moments, gradients).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NamedArrays<R>(pub BTreeMap<String, Array<R>>);

impl<R: Real> NamedArrays<R> {
    pub fn new() -> Self {
        NamedArrays(BTreeMap::new())
    }

    pub fn insert(&mut self, name: &str, array: Array<R>) {
        self.0.insert(name.to_string(), array);
    }

    pub fn get(&self, name: &str) -> Option<&Array<R>> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<R>)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.0.values().map(|a| a.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        NamedArrays(
            self.0
                .iter()
                .map(|(k, a)| (k.clone(), Array::zeros(&a.shape)))
                .collect(),
        )
    }

    /// Differentiable leaves, one per array.
    pub fn to_params(&self) -> TensorMap<R> {
        self.0
            .iter()
            .map(|(k, a)| {
                (
                    k.clone(),
                    Tensor::param(a.data.clone(), &a.shape).expect("consistent array"),
                )
            })
            .collect()
    }

    /// Graph constants, one per array.
    pub fn to_constants(&self) -> TensorMap<R> {
        self.0
            .iter()
            .map(|(k, a)| {
                (
                    k.clone(),
                    Tensor::from_vec(a.data.clone(), &a.shape).expect("consistent array"),
                )
            })
            .collect()
    }

    pub fn from_tensors(tensors: &TensorMap<R>) -> Self {
        NamedArrays(
            tensors
                .iter()
                .map(|(k, t)| (k.clone(), Array::new(t.shape().to_vec(), t.to_vec())))
                .collect(),
        )
    }

    /// Rebuilds from arrays listed in `names` order.
    pub fn from_ordered(names: &[String], tensors: &[Tensor<R>]) -> Self {
        NamedArrays(
            names
                .iter()
                .zip(tensors)
                .map(|(k, t)| (k.clone(), Array::new(t.shape().to_vec(), t.to_vec())))
                .collect(),
        )
    }

    /// Same names and shapes as `other`.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::Compatibility(format!(
                "parameter sets have {} vs {} arrays",
                self.0.len(),
                other.0.len()
            )));
        }
        for ((ka, a), (kb, b)) in self.0.iter().zip(&other.0) {
            if ka != kb || a.shape != b.shape {
                return Err(Error::Compatibility(format!(
                    "parameter {ka}{:?} does not match {kb}{:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Flat concatenation in name order.
    pub fn flatten(&self) -> Vec<R> {
        self.0
            .values()
            .flat_map(|a| a.data.iter().copied())
            .collect()
    }

    /// Inverse of [`NamedArrays::flatten`] against this layout.
    pub fn unflatten(&self, flat: &[R]) -> Self {
        let mut offset = 0;
        NamedArrays(
            self.0
                .iter()
                .map(|(k, a)| {
                    let n = a.data.len();
                    let data = flat[offset..offset + n].to_vec();
                    offset += n;
                    (k.clone(), Array::new(a.shape.clone(), data))
                })
                .collect(),
        )
    }

    pub fn map_f64(&self) -> NamedArrays<f64> {
        NamedArrays(
            self.0
                .iter()
                .map(|(k, a)| {
                    (
                        k.clone(),
                        Array::new(a.shape.clone(), a.data.iter().map(|v| v.f64()).collect()),
                    )
                })
                .collect(),
        )
    }

    pub fn from_f64(src: &NamedArrays<f64>) -> Self {
        NamedArrays(
            src.0
                .iter()
                .map(|(k, a)| {
                    (
                        k.clone(),
                        Array::new(a.shape.clone(), a.data.iter().map(|&v| R::of(v)).collect()),
                    )
                })
                .collect(),
        )
    }
}
