//! Model graph IR: layer nodes, tensors, hardware configuration and splitting.

pub mod config;
pub mod custom;
mod graph;
pub mod op;
mod split;
pub mod tensor;

use thiserror::Error;

pub use config::{resolve_config, HwConfig, IoType, LayerConfig, LayerSettings, Strategy, UserConfig};
pub use custom::{register_custom_op, register_custom_op_with_cost};
pub use graph::{build_graph, LayerNode, Metadata, ModelGraph, Precision, Role};
pub use op::{ActivationKind, Attrs, ConvAttrs, Op, PoolAttrs, QuantizerKind};
pub use split::split_graph;
pub use tensor::{QTensor, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("cycle through node '{0}'")]
    Cycle(String),
    #[error("shape mismatch at '{node}': expected {expected:?}, got {got:?}")]
    ShapeMismatch { node: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("node '{node}' references unknown node '{input}'")]
    DanglingEdge { node: String, input: String },
    #[error("duplicate node name '{0}'")]
    DuplicateName(String),
    #[error("node '{node}': {reason}")]
    Arity { node: String, reason: String },
    #[error("node '{node}' is missing weight '{weight}'")]
    MissingWeight { node: String, weight: String },
    #[error("bad geometry at '{node}': {reason}")]
    BadGeometry { node: String, reason: String },
    #[error("unsupported op '{op}' at '{node}'")]
    UnsupportedOp { node: String, op: String },
    #[error("invalid cut after '{0}'")]
    InvalidCut(String),
    #[error("unknown layer name '{0}'")]
    UnknownLayerName(String),
    #[error("strategy {strategy} is not valid for {op} layer '{node}'")]
    InvalidStrategyForOp { node: String, op: String, strategy: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("custom op tag '{0}' already registered")]
    DuplicateTag(String),
    #[error("graph schema: {0}")]
    Schema(String),
}
