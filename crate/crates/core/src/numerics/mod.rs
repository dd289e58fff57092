//! Dense tensors, reverse-mode differentiation, and the `.mvt` tensor file format.

pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod mvt;
pub mod ops;
pub mod tensor;

pub use graph::{Graph, PoolKind, Var};
pub use tensor::{DType, MatRef, Scalar, Tensor};
