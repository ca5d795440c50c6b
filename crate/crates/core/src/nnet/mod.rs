//! Neural network building blocks.
//!
//! The kernels are written by hand with explicit loops and matching backward
//! passes; every gradient in the crate is validated against central finite
//! differences (see [`gradcheck`]). Parameters live in a [`params::ParamSet`]
//! so optimisers and the gradient checker can treat a model as one flat
//! coordinate vector.

pub mod container;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod stack;
pub mod tensor;

pub use container::{read_container, sha256_hex_of_file, write_container, NamedTensor};
pub use gradcheck::{grad_check, Differentiable, GradCheckReport};
pub use params::{glorot_uniform, LrSchedule, ParamSet};
pub use stack::{ForwardOut, LayerSpec, StackNet};
pub use tensor::Tensor2;
