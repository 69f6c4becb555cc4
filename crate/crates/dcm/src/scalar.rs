//! Scalar abstraction for the numeric core.
//!
//! Everything below the experiment harness (matrices, layer primitives, the
//! tape, splines, masking math) is generic over [`Scalar`] so the same code
//! runs in f32 or f64. The experiment stack itself is pinned to f64 through
//! the [`crate::Real`] alias: the gradient-check tolerances it asserts are
//! not reachable in 32-bit arithmetic.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign, NumCast};

pub trait Scalar:
    Float + NumAssign + NumCast + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 not representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    fn from_usize(v: usize) -> Self {
        <Self as NumCast>::from(v).expect("usize not representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
