//! Dense tensors, reverse-mode autodiff, AdamW and gradient checking.

pub mod adamw;
mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use batch::batch_gradients;
pub use kernels::{attention, l2norm, linear, Mlp2};
pub use params::{Graph, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("parameter `{0}` is not connected to the loss; using a zero gradient")]
    DisconnectedParameter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
