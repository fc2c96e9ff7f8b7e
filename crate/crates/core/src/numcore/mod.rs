//! Dense tensors and reverse-mode differentiation, generic over [`Scalar`].

pub mod dump;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod linalg;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use graph::{softmax, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
