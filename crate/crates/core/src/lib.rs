//! Prototype-conditioned denoising diffusion.
//!
//! A feature encoder maps clean images to a learnable bank of prototypes; the
//! nearest prototype, enriched with a timestep embedding, conditions a U-Net
//! noise predictor through cross-attention at its bottleneck. Everything here
//! runs on the CPU with hand-written backward passes and is generic over the
//! [`Scalar`] type (`f32` for training, `f64` for gradient checks).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod prototypes;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{PdmError, Result};
pub use scalar::Scalar;
pub use tensor::{Module, Param, Tensor};
pub use config::{DatasetSpec, RunConfig, Variant};
pub use training::{LossReport, ModelState};

/// Single-precision model state, used for training and sampling.
pub type ModelStateF32 = ModelState<f32>;
/// Double-precision model state, used for gradient checks.
pub type ModelStateF64 = ModelState<f64>;
pub type DatasetF32 = data::Dataset<f32>;
pub type TensorF32 = Tensor<f32>;
