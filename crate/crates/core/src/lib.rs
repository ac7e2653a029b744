pub mod conllu;
pub mod grounder;
pub mod injection;
pub mod numerics;
pub mod trace_inspect;
pub mod train_eval;
pub mod tree_prompt;
mod scalar;

pub use scalar::Scalar;

/// Single-precision aliases used for training runs.
pub type Tensor32 = numerics::Tensor<f32>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type PromptedModel32 = train_eval::PromptedModel<f32>;
pub type FrozenBackbone32 = grounder::FrozenBackbone<f32>;

/// Double-precision aliases used for gradient checks.
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type PromptedModel64 = train_eval::PromptedModel<f64>;
pub type FrozenBackbone64 = grounder::FrozenBackbone<f64>;
