//! MIMO joint source-channel coding over an SVD-precoded Rayleigh link with
//! imperfect channel estimates.
//!
//! The crate is generic over the real scalar ([`Scalar`]): `f64` for
//! gradient and channel-algebra verification, `f32` for training runs. The
//! `*64`/`*32` aliases below fix the scalar for the common types.

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{ChannelError, Error, Result, TensorError};
pub use scalar::{Precision, Scalar};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type ComplexMatrix64 = channel::ComplexMatrix<f64>;
pub type ComplexMatrix32 = channel::ComplexMatrix<f32>;
