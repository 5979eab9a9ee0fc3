//! Graph-attention channel and spatial recalibration for convolutional
//! networks, on a small reverse-mode autodiff substrate.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod rng;
pub mod scalar;
pub mod steam;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zoo;

pub use attention::{GraphAttentionParams, LogitScale, Neighborhoods};
pub use autodiff::{Backward, BackwardCtx, FlopCount, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use graph::{EdgeDropMask, Graph};
pub use rng::Xoshiro256;
pub use scalar::Scalar;
pub use steam::{Activation, Arrangement, Phase, Pool, SteamConfig, SteamUnit};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
