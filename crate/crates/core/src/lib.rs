//! Selective state-space segmentation network with a self-contained tensor
//! engine: reverse-mode autodiff, four-direction 2D scan, U-shaped
//! encoder-decoder, losses/metrics, training harness, and bit-exact file IO.
//!
//! Core math is generic over the scalar type ([`scalar::Scalar`], f32/f64);
//! the aliases below pin the default f64 instantiation used across the crate.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod ss2d;
pub mod ssm;
pub mod tape;
pub mod train;
pub mod verify;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use net::NetworkConfig;
pub use rng::Rng;
pub use tape::Var;

/// Default-precision tensor.
pub type Tensor = tensor::TensorBase<f64>;
/// Default-precision autodiff tape.
pub type Tape = tape::TapeBase<f64>;
/// Default-precision gradient map.
pub type Gradients = tape::Gradients<f64>;
/// Default-precision scan-head parameters.
pub type SsmParams = ssm::SsmParams<f64>;
/// Default-precision network.
pub type VmUnet = net::VmUnetBase<f64>;
/// Default-precision optimizer.
pub type AdamW = optim::AdamW<f64>;
