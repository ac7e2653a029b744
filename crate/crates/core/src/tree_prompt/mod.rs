//! Tree-structured prompt construction.
//!
//! Every parsed word becomes a node. Its embedding `[word; pos; dep]` is
//! L2-normalised and projected by the fully connected layer of the module
//! that owns the node (`Leaf`, `Rel` or `Enti`), giving the node
//! representation `r`. Walking the tree bottom-up, each node's prompt is
//! `h = MLP([mean(child h); r])`. The prompts are then laid out root-first
//! (pre-order), receive a learnable positional embedding, and are fused with
//! the global prompt `G` by attention over `[H; G]`; the outputs at the `G`
//! positions form the final prompt `P`.

mod check;
mod word_vectors;
mod model;
mod vocab;

pub use check::{prompt_grad_check, random_tree};

pub use model::{
    compose_node_prompt, embed_node, node_representation, EmbeddingTables, FusionConfig, FusionMode, ModuleNet,
    ModuleParams, NodePrompt, NodeVars, TreePrompt, TreePromptConfig, GLOBAL_PROMPT,
};
pub use word_vectors::{WordVectors, WORD_VECTORS};
pub use vocab::{NodeIds, Table, Vocab, UNK, UNK_ID};

use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum TreePromptError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sentence has {len} nodes, more than the {max} positional slots")]
    SentenceTooLong { len: usize, max: usize },
    #[error("node {index} is routed to Leaf but has children")]
    LeafWithChildren { index: usize },
    #[error("node {index} is an internal module but has no children")]
    NonLeafWithoutChildren { index: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("word vectors have width {found}, the word table expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
