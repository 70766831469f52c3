#![no_std]
extern crate alloc;

pub mod autodiff;
pub mod backbone;
pub mod dataset;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod real;
pub mod sampling;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
