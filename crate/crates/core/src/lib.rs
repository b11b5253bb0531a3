//! Dark-channel-guided dual-domain dehazing network on a compact tensor/autodiff core.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fusion;
pub mod gradient_suite;
pub mod hafm;
pub mod image;
pub mod metrics;
pub mod mgam;
pub mod network;
pub mod nn;
pub mod pcgb;
pub mod priors;
pub mod scalar;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{CheckpointError, Error, Result};
pub use scalar::{DType, Scalar};
pub use image::ImageBuffer;
pub use network::{Ablation, DgfdNet, ModelConfig};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Net32 = DgfdNet<f32>;
pub type Net64 = DgfdNet<f64>;
