//! ReLU and sigmoid with their exact local gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Positions where the input was strictly positive.
#[derive(Debug, Clone)]
pub struct ReluCache {
    active: Vec<bool>,
}

pub fn relu<T: Scalar>(mut x: Tensor<T>) -> (Tensor<T>, ReluCache) {
    let mut active = vec![false; x.len()];
    for (v, a) in x.data_mut().iter_mut().zip(&mut active) {
        if *v > T::zero() {
            *a = true;
        } else {
            *v = T::zero();
        }
    }
    (x, ReluCache { active })
}

/// Gradient at exactly zero is defined as zero.
pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, cache: &ReluCache) -> Result<Tensor<T>> {
    if dy.len() != cache.active.len() {
        return Err(Error::ShapeMismatch(format!(
            "dy has {} values, relu cache recorded {}",
            dy.len(),
            cache.active.len()
        )));
    }
    let data = dy
        .data()
        .iter()
        .zip(&cache.active)
        .map(|(&g, &a)| if a { g } else { T::zero() })
        .collect();
    Tensor::new(dy.shape(), data)
}

/// The forward output, since dσ/dx = σ·(1−σ).
#[derive(Debug, Clone)]
pub struct SigmoidCache<T> {
    y: Vec<T>,
}

pub fn sigmoid<T: Scalar>(mut x: Tensor<T>) -> (Tensor<T>, SigmoidCache<T>) {
    for v in x.data_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
    let y = x.data().to_vec();
    (x, SigmoidCache { y })
}

pub fn sigmoid_backward<T: Scalar>(dy: &Tensor<T>, cache: &SigmoidCache<T>) -> Result<Tensor<T>> {
    if dy.len() != cache.y.len() {
        return Err(Error::ShapeMismatch(format!(
            "dy has {} values, sigmoid cache recorded {}",
            dy.len(),
            cache.y.len()
        )));
    }
    let data = dy
        .data()
        .iter()
        .zip(&cache.y)
        .map(|(&g, &y)| g * y * (T::one() - y))
        .collect();
    Tensor::new(dy.shape(), data)
}
