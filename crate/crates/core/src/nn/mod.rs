//! Layer graph, freeze masks and the Adam optimizer.

mod adam;
mod freeze;
mod network;

use thiserror::Error;

use crate::tensor::TensorError;

pub use adam::{AdamConfig, AdamState, ParamUpdate};
pub use freeze::{apply_freeze, trainable_parameter_count, FreezeMask};
pub use network::{Forward, GraphBuilder, Layer, LayerCategory, LayerKind, Network, Param, ParamGrads, Source};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: {detail}")]
    Build { layer: String, detail: String },
    #[error("duplicate layer name {0}")]
    DuplicateName(String),
    #[error("no layer named {0}")]
    UnknownLayer(String),
    #[error("input shape {got:?} does not match network input [N, {expected:?}]")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("trainable parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("gradient for {0} has the wrong shape")]
    GradientShape(String),
    #[error("cannot leave the last {k} layers trainable: network has {available} parameterized layers")]
    FreezeOutOfRange { k: usize, available: usize },
    #[error("freeze mask does not match this network: {0}")]
    MaskMismatch(String),
}
