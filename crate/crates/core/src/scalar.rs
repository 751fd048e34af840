//! The scalar abstraction every numeric routine in the crate is written against.
//!
//! Geometry, layers and models are generic over [`Scalar`], so the same code
//! runs on `f64` (the default), `f32`, and the reverse-mode [`Var`](crate::ad::Var)
//! used for gradients. Two hooks let a scalar type replace a whole kernel:
//! dense networks and symmetric matrix functions. The tape scalar uses them to
//! record matrix-level backward rules instead of scalar chains.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive};

use crate::error::Result;
use crate::linalg::{self, Mat, SymFn};
use crate::nn::{self, NetworkParams};

pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + Sum
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Lifts an `f64` constant.
    fn c(x: f64) -> Self;

    /// Primal value as `f64`.
    fn value(self) -> f64;

    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).fold(Self::zero(), |acc, (&x, &y)| acc + x * y)
    }

    /// Evaluates a dense network on `rows` stacked input rows.
    fn dense_network(net: &NetworkParams<Self>, input: &[Self], rows: usize) -> Result<Vec<Self>> {
        nn::evaluate(net, input, rows).map(|run| run.output)
    }

    /// `U f(Λ) Uᵀ` for a symmetric matrix.
    fn sym_function(a: &Mat<Self>, f: SymFn) -> Result<Mat<Self>> {
        linalg::sym_function_eigen(a, f)
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn value(self) -> f64 {
        self as f64
    }
}

/// Converts a slice of `f64` into constants of `T`.
pub fn lift<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&x| T::c(x)).collect()
}

/// Primal values of a slice.
pub fn values<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.value()).collect()
}
