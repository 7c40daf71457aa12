//! Reverse-mode autodiff over small dense tensors, with the convolution
//! family needed for MobileNet/EfficientNet style backbones.
//!
//! Everything is generic over [`Scalar`] so the same graph runs in `f64`
//! (gradient checks, reference runs) or `f32` (faster training). The
//! concrete aliases at the bottom of this file are what most callers use.

pub mod adam;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod scaling;
pub mod scalar;
pub mod tensor;

pub use adam::{collect_grads, Adam, AdamConfig, Grads};
pub use cost::{flops, param_count, LayerKind, LayerSpec};
pub use error::NnError;
pub use graph::{Activation, Graph, Mode, NodeId};
pub use layers::{
    depthwise_separable, Affine, BatchNorm, Block, ConvBn, ConvKind, InvertedResidual, ParamId, ParamStore,
    Sequential,
};
pub use scalar::Scalar;
pub use scaling::{compound_scale, ScaledConfig, ScalingCoefficients, StageSpec};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type Adam64 = Adam<f64>;
pub type Adam32 = Adam<f32>;
