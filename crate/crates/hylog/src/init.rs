//! Parameter initialization helpers.
//!
//! Convolution and linear weights draw from a uniform distribution scaled
//! by 1/sqrt(fan_in); biases start at zero, normalization gains at one.

use rand::Rng;

use crate::tensor::{Elem, Tensor};

pub(crate) fn fan_in_uniform<T: Elem, R: Rng>(
    rng: &mut R,
    fan_in: usize,
    shape: &[usize],
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        T::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound)
    })
    .with_requires_grad(true)
}

pub(crate) fn zeros_param<T: Elem>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_requires_grad(true)
}

pub(crate) fn ones_param<T: Elem>(shape: &[usize]) -> Tensor<T> {
    Tensor::ones(shape).with_requires_grad(true)
}
