//! Group-equivariant layers, proximal reconstruction and equivariant-imaging
//! training for linear inverse problems `y = A u + noise`.
//!
//! Numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the precision used by the experiments.

pub mod autodiff;
pub mod error;
pub mod groups;
pub mod identifiability;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod operators;
pub mod reconstruct;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{GradientMap, Graph, LinearMap, Var};
pub use error::{Error, Result};
pub use groups::{CompareRegion, FiniteGroup, ImageAction, Interpolation, Representation};
pub use operators::{LinearOperator, NoiseKind, NoiseModel};
pub use scalar::Scalar;
pub use tensor::{Padding, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Operator64 = LinearOperator<f64>;
pub type Operator32 = LinearOperator<f32>;
