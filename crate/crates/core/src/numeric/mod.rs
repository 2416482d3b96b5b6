//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed on it; [`Graph::backward`]
//! walks the record once in reverse and fills gradients for every node that
//! requires one. Graphs are single-use: a second `backward` is an error.
//!
//! Only the operations needed by the projection network, the frozen composer
//! and the two training losses are provided. Broadcasting is limited to adding
//! a row vector to every row of a matrix.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{AttnSegment, Graph, Var};
pub use tensor::Tensor;

use core::fmt::Debug;
use num_traits::{Float, FromPrimitive};

/// Norm below which a vector cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

/// Variance offset used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floating-point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Send + Sync + core::iter::Sum + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Inner product of two equal-length slices, accumulated left to right.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}
