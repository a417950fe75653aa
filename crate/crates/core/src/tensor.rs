//! Scalar abstraction shared by the f32 training path and the f64 checking path.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type usable by the tape and the model.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub type Matrix<F> = Array2<F>;

/// Element-type conversion for whole matrices.
pub fn cast<A: Scalar, B: Scalar>(m: &Array2<A>) -> Array2<B> {
    m.mapv(|x| B::of(x.as_f64()))
}

pub fn all_finite<F: Scalar>(m: &Array2<F>) -> bool {
    m.iter().all(|x| x.is_finite())
}
