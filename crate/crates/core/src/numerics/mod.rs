//! Dense tensors, reverse-mode gradients, AdamW and its schedules, and the
//! checkpoint container.

mod checkpoint;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta, Entry};
pub use graph::{Graph, Var};
pub use optim::{AdamW, OptimizerConfig};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
