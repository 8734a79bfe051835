//! Discrete-latent autoencoding for pixel art: a small tensor engine with
//! reverse-mode autodiff, a sprite data pipeline, the quantized autoencoder
//! model family with PixelSight/Adapter enhancements, a gated conditional
//! autoregressive prior over encoding grids, reconstruction metrics, and a
//! checkpoint container.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod palette;
pub mod prior;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{ActKind, BatchNormMode, LossKind, Tape, Var};
pub use optim::{adam_step, AdamState};
pub use tensor::{Scalar, Tensor};
