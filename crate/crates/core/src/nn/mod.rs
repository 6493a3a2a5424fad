//! Tensor kernels (forward and backward), layer specifications and a
//! sequential graph executor with residual skips.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layer;
pub mod naive;

pub use graph::{Sequential, Tape};
pub use kernels::{ConvGeometry, GeluMode, Padding};
pub use layer::{BatchNormParams, Cache, LayerKind, LayerSpec, Op};
