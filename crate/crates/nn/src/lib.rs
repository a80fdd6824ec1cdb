//! Minimal reverse-mode automatic differentiation for the convolutional
//! networks used by the simulation pipeline.
//!
//! Everything runs in `f64` on the CPU so that analytic gradients can be
//! checked against finite differences at tight tolerances.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use graph::{Conv2dCfg, ConvTranspose2dCfg, Gradients, Graph, NodeId};
pub use params::{Adam, ParamId, ParamIoError, ParamStore};
pub use tensor::Tensor;
