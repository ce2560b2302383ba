//! Scalar abstraction so the network stack runs in f32 for training and f64
//! for gradient checking without duplicated code.

use std::fmt::{Debug, Display};

/// Floating-point element type of tensors and network parameters.
///
/// `f32` is the working precision; `f64` exists so finite-difference checks
/// can verify the same code path at a precision where central differences are
/// trustworthy.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::NumAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
