//! Prior knowledge distillation for face super-resolution.
//!
//! A teacher network sees the low-resolution face together with a face
//! parsing map of the high-resolution target; a student sees only the
//! low-resolution face and learns from the ground truth, the teacher's output
//! and the teacher's intermediate features.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the two instantiations.

pub mod autograd;
pub mod data;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod param;
pub mod resample;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{ElementMode, Scalar};
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = net::Network<f32>;
pub type Network64 = net::Network<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
