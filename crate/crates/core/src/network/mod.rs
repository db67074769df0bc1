//! Generator and discriminator networks.
//!
//! [`arch`] turns an [`ArchConfig`] into the layer tables and compiled node
//! graphs; [`graph`] evaluates them and computes gradients; [`kernels`] holds
//! the convolution lowering.

pub mod arch;
pub mod graph;
pub mod kernels;

use thiserror::Error;

pub use arch::{
    build_discriminator, build_generator, count_parameters, infer_shapes, render_layer_table,
    Activation, ArchConfig, LayerKind, LayerSpec, NetRole, NetworkGraph,
};
pub use graph::{ActKind, Grads, Graph, GraphBuilder, Mode, Param, ParamRole, Tape};
pub use kernels::ConvGeom;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid architecture config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
}
