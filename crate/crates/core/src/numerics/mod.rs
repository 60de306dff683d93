//! Dense tensors, layer primitives with exact backward passes, gradient
//! flattening and the finite-difference oracle.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use params::{flatten_grads, unflatten_grads, GradientVector, GroupSet, ParamGroup, Parameter};
pub use tensor::Tensor;
