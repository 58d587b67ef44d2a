//! Tensors, reverse-mode autodiff, layers, parameter groups and Adam.

pub mod checkpoint;
pub mod graph;
pub mod nn;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, GradMap, GroupId, ParamId, ParamStore};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MathError {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gradient for unknown parameter #{0}")]
    UnknownParam(usize),
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
