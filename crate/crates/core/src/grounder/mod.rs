//! Synthetic grounding world and the frozen backbone that is prompted.

pub mod backbone;
pub mod dataset;
pub mod grammar;
mod pretrain;
pub mod world;

pub use backbone::{argmax, Backbone, BackboneConfig, ForwardInfo, PromptInput};
pub use dataset::{gen_example, resolve_compositional, Dataset, DatasetConfig, GroundingExample, Split, SplitSizes};
pub use pretrain::{CHECKPOINT_FILE, VOCAB_FILE, pretrain_backbone, score_regions, FrozenBackbone, PretrainConfig, PretrainReport};
pub use world::{iou, BBox, Description, Relation, Scene, WorldConfig};

use crate::injection::InjectionError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum GrounderError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("no satisfiable template for {split} example {index} after bounded retries")]
    UnsatisfiableTemplate { split: Split, index: usize },
    #[error("backbone reached only {accuracy:.3} held-out accuracy (need at least {required})")]
    ConvergenceFailure { accuracy: f64, required: f64 },
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
