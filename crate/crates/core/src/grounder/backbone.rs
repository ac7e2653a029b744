//! Small pre-LN transformer encoder that scores regions against a query.
//!
//! Sequence layout is `[P; T; I]`: optional prompt rows, text rows (word +
//! position + type embedding) and region rows (projected features + type
//! embedding). The query vector is the mean of the prompt and text rows
//! after the final layer norm, projected once; a region's score is its
//! scaled dot product with that vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GrounderError;
use crate::injection::InjectionError;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_text_len: usize,
    pub feature_dim: usize,
    pub vocab_size: usize,
}

impl BackboneConfig {
    pub fn new(feature_dim: usize, vocab_size: usize) -> Self {
        BackboneConfig { d_model: 64, layers: 4, heads: 4, ffn: 256, max_text_len: 24, feature_dim, vocab_size }
    }

    pub fn validate(&self) -> Result<(), GrounderError> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(GrounderError::Config(format!("invalid backbone shape {self:?}")));
        }
        Ok(())
    }
}

/// Prompt delivered to a forward pass.
#[derive(Clone, Debug)]
pub enum PromptInput {
    None,
    /// Prepended once before the first layer.
    Input(Var),
    /// One prompt per layer, replaced before every layer.
    Multi(Vec<Var>),
}

/// Instrumentation recorded by [`Backbone::forward`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardInfo {
    /// Rows entering each layer.
    pub layer_seq_lens: Vec<usize>,
    /// Whether any layer consumed prompt-position outputs of the previous layer.
    pub prompt_outputs_reused: bool,
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    word: ParamId,
    text_pos: ParamId,
    types: ParamId,
    region_w: ParamId,
    region_b: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    pool_w: ParamId,
    pool_b: ParamId,
}

pub const PREFIX: &str = "backbone.";

fn layer_names(i: usize) -> [String; 12] {
    ["ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.g", "ln2.b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2"]
        .map(|n| format!("{PREFIX}layer{i}.{n}"))
}

impl Backbone {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self, GrounderError> {
        config.validate()?;
        let (d, f) = (config.d_model, config.ffn);
        let lin = |o: usize, i: usize, rng: &mut R| Tensor::randn(&[o, i], 1.0 / (i as f64).sqrt(), rng);
        store.insert(format!("{PREFIX}emb.word"), Tensor::randn(&[config.vocab_size, d], 1.0, rng))?;
        store.insert(format!("{PREFIX}emb.text_pos"), Tensor::randn(&[config.max_text_len, d], 0.1, rng))?;
        store.insert(format!("{PREFIX}emb.type"), Tensor::randn(&[2, d], 0.1, rng))?;
        store.insert(format!("{PREFIX}region.w"), lin(d, config.feature_dim, rng))?;
        store.insert(format!("{PREFIX}region.b"), Tensor::zeros(&[d]))?;
        for i in 0..config.layers {
            let n = layer_names(i);
            store.insert(n[0].clone(), Tensor::full(&[d], T::one()))?;
            store.insert(n[1].clone(), Tensor::zeros(&[d]))?;
            for name in &n[2..6] {
                store.insert(name.clone(), lin(d, d, rng))?;
            }
            store.insert(n[6].clone(), Tensor::full(&[d], T::one()))?;
            store.insert(n[7].clone(), Tensor::zeros(&[d]))?;
            store.insert(n[8].clone(), lin(f, d, rng))?;
            store.insert(n[9].clone(), Tensor::zeros(&[f]))?;
            store.insert(n[10].clone(), lin(d, f, rng))?;
            store.insert(n[11].clone(), Tensor::zeros(&[d]))?;
        }
        store.insert(format!("{PREFIX}ln_f.g"), Tensor::full(&[d], T::one()))?;
        store.insert(format!("{PREFIX}ln_f.b"), Tensor::zeros(&[d]))?;
        store.insert(format!("{PREFIX}pool.w"), lin(d, d, rng))?;
        store.insert(format!("{PREFIX}pool.b"), Tensor::zeros(&[d]))?;
        Self::attach(store, config)
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, config: BackboneConfig) -> Result<Self, GrounderError> {
        config.validate()?;
        let find = |n: &str| store.id(n).ok_or_else(|| GrounderError::Config(format!("missing parameter `{n}`")));
        let p = |n: &str| find(&format!("{PREFIX}{n}"));
        let layers = (0..config.layers)
            .map(|i| {
                let n = layer_names(i);
                Ok(LayerIds {
                    ln1_g: find(&n[0])?,
                    ln1_b: find(&n[1])?,
                    wq: find(&n[2])?,
                    wk: find(&n[3])?,
                    wv: find(&n[4])?,
                    wo: find(&n[5])?,
                    ln2_g: find(&n[6])?,
                    ln2_b: find(&n[7])?,
                    w1: find(&n[8])?,
                    b1: find(&n[9])?,
                    w2: find(&n[10])?,
                    b2: find(&n[11])?,
                })
            })
            .collect::<Result<Vec<_>, GrounderError>>()?;
        let word = p("emb.word")?;
        if store.get(word).shape() != [config.vocab_size, config.d_model] {
            return Err(GrounderError::Config(format!("word table shape {:?}", store.get(word).shape())));
        }
        Ok(Backbone {
            word,
            text_pos: p("emb.text_pos")?,
            types: p("emb.type")?,
            region_w: p("region.w")?,
            region_b: p("region.b")?,
            layers,
            lnf_g: p("ln_f.g")?,
            lnf_b: p("ln_f.b")?,
            pool_w: p("pool.w")?,
            pool_b: p("pool.b")?,
            config,
        })
    }

    pub fn param_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store.with_prefix(PREFIX)
    }

    /// Text rows, `M×d`.
    pub fn embed_text<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var, GrounderError> {
        if ids.is_empty() || ids.len() > self.config.max_text_len {
            return Err(GrounderError::Config(format!("query of {} tokens (max {})", ids.len(), self.config.max_text_len)));
        }
        let (word, pos, types) = (g.param(self.word), g.param(self.text_pos), g.param(self.types));
        let w = g.gather_rows(word, ids)?;
        let p = g.slice_rows(pos, 0, ids.len())?;
        let t = g.gather_rows(types, &vec![0; ids.len()])?;
        let x = g.add(w, p)?;
        Ok(g.add(x, t)?)
    }

    /// Region rows, `K×d`.
    pub fn embed_regions<T: Scalar>(&self, g: &mut Graph<'_, T>, features: &Tensor<T>) -> Result<Var, GrounderError> {
        let f = g.constant(features.clone());
        let (w, b, types) = (g.param(self.region_w), g.param(self.region_b), g.param(self.types));
        let x = g.matmul_nt(f, w)?;
        let x = g.add_row(x, b)?;
        let t = g.gather_rows(types, &vec![1; features.rows()])?;
        Ok(g.add(x, t)?)
    }

    /// Transformer block `i` (0-based) over all rows of `x`.
    pub fn layer<T: Scalar>(&self, g: &mut Graph<'_, T>, i: usize, x: Var) -> Result<Var, GrounderError> {
        let l = *self.layers.get(i).ok_or(InjectionError::LayerIndexOutOfRange { index: i, layers: self.layers.len() })?;
        let (g1, b1) = (g.param(l.ln1_g), g.param(l.ln1_b));
        let h = g.layer_norm(x, g1, b1)?;
        let (wq, wk, wv, wo) = (g.param(l.wq), g.param(l.wk), g.param(l.wv), g.param(l.wo));
        let q = g.matmul_nt(h, wq)?;
        let k = g.matmul_nt(h, wk)?;
        let v = g.matmul_nt(h, wv)?;
        let heads = self.config.heads;
        let hd = self.config.d_model / heads;
        let att = if heads == 1 {
            g.attention(q, k, v)?
        } else {
            let mut parts = Vec::with_capacity(heads);
            for j in 0..heads {
                let qs = g.slice_cols(q, j * hd, (j + 1) * hd)?;
                let ks = g.slice_cols(k, j * hd, (j + 1) * hd)?;
                let vs = g.slice_cols(v, j * hd, (j + 1) * hd)?;
                parts.push(g.attention(qs, ks, vs)?);
            }
            g.concat_cols(&parts)?
        };
        let att = g.matmul_nt(att, wo)?;
        let x = g.add(x, att)?;
        let (g2, b2) = (g.param(l.ln2_g), g.param(l.ln2_b));
        let h = g.layer_norm(x, g2, b2)?;
        let (w1, c1, w2, c2) = (g.param(l.w1), g.param(l.b1), g.param(l.w2), g.param(l.b2));
        let h = g.matmul_nt(h, w1)?;
        let h = g.add_row(h, c1)?;
        let h = g.relu(h);
        let h = g.matmul_nt(h, w2)?;
        let h = g.add_row(h, c2)?;
        Ok(g.add(x, h)?)
    }

    /// Layer `i` on `[P_i; state]`; the prompt-position outputs are dropped.
    pub fn layer_inject<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        i: usize,
        prompt: Var,
        state: Var,
    ) -> Result<Var, GrounderError> {
        if i >= self.layers.len() {
            return Err(InjectionError::LayerIndexOutOfRange { index: i, layers: self.layers.len() }.into());
        }
        let n = g.value(prompt).rows();
        if g.value(prompt).cols() != self.config.d_model {
            return Err(InjectionError::DimMismatch { prompt: g.value(prompt).cols(), text: self.config.d_model }.into());
        }
        let x = g.concat_rows(&[prompt, state])?;
        let y = self.layer(g, i, x)?;
        let rows = g.value(y).rows();
        Ok(g.slice_rows(y, n, rows)?)
    }

    /// Region scores `1×K` for one query.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        text_ids: &[usize],
        features: &Tensor<T>,
        prompt: &PromptInput,
    ) -> Result<(Var, ForwardInfo), GrounderError> {
        let t = self.embed_text(g, text_ids)?;
        let r = self.embed_regions(g, features)?;
        let (m, k) = (text_ids.len(), features.rows());
        let mut info = ForwardInfo::default();
        let (mut x, query_rows) = match prompt {
            PromptInput::None => (g.concat_rows(&[t, r])?, m),
            PromptInput::Input(p) => {
                let n = g.value(*p).rows();
                if n > 0 && g.value(*p).cols() != self.config.d_model {
                    return Err(InjectionError::DimMismatch { prompt: g.value(*p).cols(), text: self.config.d_model }.into());
                }
                let parts: Vec<Var> = if n == 0 { vec![t, r] } else { vec![*p, t, r] };
                (g.concat_rows(&parts)?, n + m)
            }
            PromptInput::Multi(ps) => {
                if ps.len() != self.layers.len() {
                    return Err(InjectionError::LayerIndexOutOfRange { index: ps.len(), layers: self.layers.len() }.into());
                }
                (g.concat_rows(&[t, r])?, m)
            }
        };
        for i in 0..self.layers.len() {
            match prompt {
                PromptInput::Multi(ps) => {
                    info.layer_seq_lens.push(g.value(ps[i]).rows() + g.value(x).rows());
                    x = self.layer_inject(g, i, ps[i], x)?;
                }
                _ => {
                    info.layer_seq_lens.push(g.value(x).rows());
                    x = self.layer(g, i, x)?;
                }
            }
        }
        let rows = g.value(x).rows();
        debug_assert_eq!(rows, query_rows + k);
        let (fg, fb) = (g.param(self.lnf_g), g.param(self.lnf_b));
        let x = g.layer_norm(x, fg, fb)?;
        let q = g.slice_rows(x, 0, query_rows)?;
        let q = g.mean_rows(q)?;
        let (pw, pb) = (g.param(self.pool_w), g.param(self.pool_b));
        let q = g.matmul_nt(q, pw)?;
        let q = g.add_row(q, pb)?;
        let regions = g.slice_rows(x, query_rows, rows)?;
        let scores = g.matmul_nt(q, regions)?;
        let scale = T::one() / T::from_usize_lossy(self.config.d_model).sqrt();
        Ok((g.scale(scores, scale), info))
    }
}

/// Highest-scoring region; ties go to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
