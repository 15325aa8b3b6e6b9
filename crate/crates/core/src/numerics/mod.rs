//! Reverse-mode automatic differentiation, dense kernels and optimizers.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a scalar node walks the record in reverse creation
//! order (which is always a valid topological order) and produces
//! [`Gradients`] for every node that depends on a tracked leaf.
//!
//! All numerics are generic over [`Real`]: `f64` is used for gradient checks
//! and reference tests, `f32` for training throughput. A single run never
//! mixes the two.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{ConvSpec, Gradients, Graph, Var};
pub use optim::{cosine_warmup_lr, Adam, AdamConfig, OptimizerVariant};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

use core::fmt::Debug;
use num_traits::Float;

/// Scalar type the numerics are generic over.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
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
