//! Dense numerics: matrices, layers with backward passes, parameter storage,
//! AdamW, and the finite-difference oracle.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod params;

pub use gradcheck::{finite_difference_gradient, relative_error, DEFAULT_EPSILON};
pub use layers::{affine_backward, affine_forward, gelu, gelu_derivative, Linear, Mlp, ResidualBlock};
pub use matrix::DenseMatrix;
pub use params::{adamw_step, AdamWConfig, Gradients, Param, ParamStore};
