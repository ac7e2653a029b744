//! Delivering a prompt to the backbone.
//!
//! Input-layer mode prepends `P` (`N×d_p`) to the text embeddings once.
//! Multi-layer mode maps `P` through a shared per-row MLP to `L` prompts,
//! adds them to a frozen global multi-layer prompt, and feeds prompt `i` to
//! layer `i`; the prompt-position outputs of each layer are discarded.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, Mlp2, NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum InjectionError {
    #[error("prompt width {prompt} does not match text width {text}")]
    DimMismatch { prompt: usize, text: usize },
    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndexOutOfRange { index: usize, layers: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Input,
    Multi,
}

impl FromStr for PromptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "input" => Ok(PromptMode::Input),
            "multi" => Ok(PromptMode::Multi),
            other => Err(format!("unknown prompt mode `{other}` (expected input or multi)")),
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Input => "input",
            PromptMode::Multi => "multi",
        })
    }
}

/// Prompt payload handed to the backbone; exactly one form per run.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptBundle<P> {
    None,
    /// `P`, `N×d_p`, prepended once.
    InputLayer(P),
    /// One `N×d_p` prompt per backbone layer.
    MultiLayer(Vec<P>),
}

impl<P> PromptBundle<P> {
    pub fn mode(&self) -> Option<PromptMode> {
        match self {
            PromptBundle::None => None,
            PromptBundle::InputLayer(_) => Some(PromptMode::Input),
            PromptBundle::MultiLayer(_) => Some(PromptMode::Multi),
        }
    }
}

/// Rows of `p` followed by rows of `text`.
pub fn inject_input_layer<T: Scalar>(p: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>, InjectionError> {
    if p.rows() > 0 && p.cols() != text.cols() {
        return Err(InjectionError::DimMismatch { prompt: p.cols(), text: text.cols() });
    }
    let mut data = p.data().to_vec();
    data.extend_from_slice(text.data());
    Ok(Tensor::new(vec![p.rows() + text.rows(), text.cols()], data)?)
}

/// Applies `mlp` (d_p → L·d_p) to every row of `p` and reshapes to `L×N×d_p`.
pub fn expand_multi_layer<T: Scalar>(p: &Tensor<T>, mlp: &Mlp2<T>, layers: usize) -> Result<Tensor<T>, InjectionError> {
    let (n, dp) = (p.rows(), p.cols());
    if layers == 0 || mlp.w2.rows() != layers * dp {
        return Err(InjectionError::LayerIndexOutOfRange { index: layers, layers: mlp.w2.rows() / dp.max(1) });
    }
    let mut out = Tensor::zeros(&[layers, n, dp]);
    for row in 0..n {
        let y = mlp.forward(p.row_slice(row))?;
        for l in 0..layers {
            let dst = (l * n + row) * dp;
            out.data_mut()[dst..dst + dp].copy_from_slice(&y[l * dp..(l + 1) * dp]);
        }
    }
    Ok(out)
}

/// Elementwise `tuned + global`.
pub fn add_to_global<T: Scalar>(tuned: &Tensor<T>, global: &Tensor<T>) -> Result<Tensor<T>, InjectionError> {
    if tuned.shape() != global.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "add_to_global",
            detail: format!("{:?} vs {:?}", tuned.shape(), global.shape()),
        }
        .into());
    }
    Ok(tuned.zip_map(global, |a, b| a + b))
}

/// Shared per-row MLP producing the tuned multi-layer prompt.
#[derive(Clone, Debug)]
pub struct MultiLayerExpander {
    pub layers: usize,
    pub d_p: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MultiLayerExpander {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        d_p: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self, InjectionError> {
        let std = 1.0 / (d_p as f64).sqrt();
        store.insert("expand.w1", Tensor::randn(&[d_p, d_p], std, rng))?;
        store.insert("expand.b1", Tensor::zeros(&[d_p]))?;
        store.insert("expand.w2", Tensor::randn(&[layers * d_p, d_p], std, rng))?;
        store.insert("expand.b2", Tensor::zeros(&[layers * d_p]))?;
        Self::attach(store, d_p, layers)
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, d_p: usize, layers: usize) -> Result<Self, InjectionError> {
        let find = |n: &str| {
            store.id(n).ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter `{n}`")))
        };
        let e = MultiLayerExpander { layers, d_p, w1: find("expand.w1")?, b1: find("expand.b1")?, w2: find("expand.w2")?, b2: find("expand.b2")? };
        if store.get(e.w2).rows() != layers * d_p {
            return Err(InjectionError::LayerIndexOutOfRange { index: layers, layers: store.get(e.w2).rows() / d_p });
        }
        Ok(e)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn mlp<T: Scalar>(&self, store: &ParamStore<T>) -> Mlp2<T> {
        Mlp2 {
            w1: store.get(self.w1).clone(),
            b1: store.get(self.b1).data().to_vec(),
            w2: store.get(self.w2).clone(),
            b2: store.get(self.b2).data().to_vec(),
        }
    }

    /// `N×(L·d_p)`; columns `l·d_p..(l+1)·d_p` are layer `l`'s prompt.
    pub fn expand<T: Scalar>(&self, g: &mut Graph<'_, T>, p: Var) -> Result<Var, InjectionError> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul_nt(p, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let y = g.matmul_nt(h, w2)?;
        Ok(g.add_row(y, b2)?)
    }

    /// Per-layer prompts `P_t[l] (+ P_g[l])`.
    pub fn layer_prompts<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        expanded: Var,
        global: Option<&[Var]>,
    ) -> Result<Vec<Var>, InjectionError> {
        let mut out = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let tuned = g.slice_cols(expanded, l * self.d_p, (l + 1) * self.d_p)?;
            out.push(match global {
                Some(gl) => g.add(tuned, gl[l])?,
                None => tuned,
            });
        }
        Ok(out)
    }
}

pub const GLOBAL_MULTI_PROMPT: &str = "prompt.global_ml";

/// The global multi-layer prompt `P_g`, `L×N×d_p`.
#[derive(Clone, Debug)]
pub struct GlobalMultiPrompt {
    pub id: ParamId,
    pub layers: usize,
    pub len: usize,
}

impl GlobalMultiPrompt {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        layers: usize,
        len: usize,
        d_p: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self, InjectionError> {
        let id = store.insert(GLOBAL_MULTI_PROMPT, Tensor::randn(&[layers, len, d_p], std, rng))?;
        Ok(GlobalMultiPrompt { id, layers, len })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>) -> Result<Self, InjectionError> {
        let id = store
            .id(GLOBAL_MULTI_PROMPT)
            .ok_or_else(|| NumericsError::Checkpoint(format!("missing parameter `{GLOBAL_MULTI_PROMPT}`")))?;
        let s = store.get(id).shape();
        if s.len() != 3 {
            return Err(NumericsError::ShapeMismatch { op: "global_ml", detail: format!("{s:?}") }.into());
        }
        Ok(GlobalMultiPrompt { id, layers: s[0], len: s[1] })
    }

    /// Layer slices on the tape, each `N×d_p`.
    pub fn layers<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Vec<Var>, InjectionError> {
        let v = g.param(self.id);
        let dp = g.value(v).cols();
        let flat = g.reshape(v, &[self.layers * self.len, dp])?;
        (0..self.layers).map(|l| Ok(g.slice_rows(flat, l * self.len, (l + 1) * self.len)?)).collect()
    }
}
