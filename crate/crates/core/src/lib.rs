pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod downstream;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod numcore;
pub mod predict;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use numcore::{Graph, Scalar, Tensor, Var};

pub type TensorF64 = Tensor<f64>;
pub type TensorF32 = Tensor<f32>;
pub type GraphF64 = Graph<f64>;
