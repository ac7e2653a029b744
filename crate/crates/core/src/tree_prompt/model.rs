use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{NodeIds, Vocab};
use super::TreePromptError;
use crate::conllu::{route_module, DepNode, DepTree, ModuleKind};
use crate::numerics::{kernels, Graph, Mlp2, ParamId, ParamStore, Tensor, Var};
use crate::Scalar;

/// Which rows attend in the fusion step. Both give identical `P`: the
/// `G`-position outputs of self-attention over `[H; G]` are exactly
/// attention with queries from `G` and keys/values from `[H; G]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    SelfAttention,
    GlobalQueries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    /// Learn query/key/value projections; off means raw rows attend.
    pub projections: bool,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { heads: 1, projections: false, mode: FusionMode::SelfAttention }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreePromptConfig {
    pub d_w: usize,
    pub d_l: usize,
    pub d_p: usize,
    /// Global prompt length `N`.
    pub prompt_len: usize,
    /// Positional slots for tree prompts.
    pub max_tree_len: usize,
    pub tree_enabled: bool,
    pub modules_enabled: bool,
    pub fusion: FusionConfig,
    /// Std of the Gaussian used for embedding tables and `G`.
    pub init_std: f64,
}

impl Default for TreePromptConfig {
    fn default() -> Self {
        TreePromptConfig {
            d_w: 300,
            d_l: 50,
            d_p: 768,
            prompt_len: 64,
            max_tree_len: 32,
            tree_enabled: true,
            modules_enabled: true,
            fusion: FusionConfig::default(),
            init_std: 0.02,
        }
    }
}

impl TreePromptConfig {
    /// Desk-scale dimensions matching the toy backbone.
    pub fn desk(d_p: usize) -> Self {
        TreePromptConfig { d_w: 32, d_l: 8, d_p, ..Default::default() }
    }

    pub fn d_n(&self) -> usize {
        self.d_w + 2 * self.d_l
    }

    /// Plain continuous prompt: neither tree composition nor modules.
    pub fn is_continuous(&self) -> bool {
        !self.tree_enabled && !self.modules_enabled
    }
}

/// Word, POS and dependency-label embedding tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables<T> {
    pub word: Tensor<T>,
    pub pos: Tensor<T>,
    pub dep: Tensor<T>,
}

impl<T: Scalar> EmbeddingTables<T> {
    pub fn d_n(&self) -> usize {
        self.word.cols() + self.pos.cols() + self.dep.cols()
    }

    pub fn lookup(&self, ids: NodeIds) -> Vec<T> {
        let mut out = Vec::with_capacity(self.d_n());
        out.extend_from_slice(self.word.row_slice(ids.word));
        out.extend_from_slice(self.pos.row_slice(ids.pos));
        out.extend_from_slice(self.dep.row_slice(ids.dep));
        out
    }
}

/// `n = [w; t; l]` for one node; unknown tokens use row 0.
pub fn embed_node<T: Scalar>(node: &DepNode, vocab: &Vocab, tables: &EmbeddingTables<T>) -> Vec<T> {
    tables.lookup(vocab.node_ids(node))
}

/// Parameters of one module: `FC` (d_p×d_n) and the two-layer MLP (2d_p→d_p→d_p).
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleNet<T> {
    pub fc_w: Tensor<T>,
    pub fc_b: Vec<T>,
    pub mlp: Mlp2<T>,
}

/// Three independent parameter sets with identical shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleParams<T> {
    pub leaf: ModuleNet<T>,
    pub rel: ModuleNet<T>,
    pub enti: ModuleNet<T>,
}

impl<T> ModuleParams<T> {
    pub fn get(&self, kind: ModuleKind) -> &ModuleNet<T> {
        match kind {
            ModuleKind::Leaf => &self.leaf,
            ModuleKind::Rel => &self.rel,
            ModuleKind::Enti => &self.enti,
        }
    }
}

/// `r = FC_kind(L2Norm(n))`.
pub fn node_representation<T: Scalar>(
    n: &[T],
    kind: ModuleKind,
    params: &ModuleParams<T>,
) -> Result<Vec<T>, TreePromptError> {
    let net = params.get(kind);
    Ok(kernels::linear(&kernels::l2norm(n), &net.fc_w, &net.fc_b)?)
}

/// `h = MLP_kind([mean(children); r])`; the mean of no children is zero.
pub fn compose_node_prompt<T: Scalar>(
    r: &[T],
    children: &[Vec<T>],
    kind: ModuleKind,
    params: &ModuleParams<T>,
) -> Result<Vec<T>, TreePromptError> {
    match (kind, children.is_empty()) {
        (ModuleKind::Leaf, false) => return Err(TreePromptError::LeafWithChildren { index: 0 }),
        (ModuleKind::Rel | ModuleKind::Enti, true) => return Err(TreePromptError::NonLeafWithoutChildren { index: 0 }),
        _ => {}
    }
    let mut f = vec![T::zero(); r.len()];
    for c in children {
        for (a, &b) in f.iter_mut().zip(c) {
            *a += b;
        }
    }
    if !children.is_empty() {
        let k = T::from_usize_lossy(children.len());
        f.iter_mut().for_each(|v| *v /= k);
    }
    f.extend_from_slice(r);
    Ok(params.get(kind).mlp.forward(&f)?)
}

/// Tape handles for one node's representation and prompt.
#[derive(Clone, Debug)]
pub struct NodeVars {
    pub index: usize,
    pub kind: ModuleKind,
    pub r: Var,
    pub h: Var,
    pub children: Vec<usize>,
}

/// Materialised per-node prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodePrompt<T> {
    pub index: usize,
    pub kind: ModuleKind,
    pub r: Vec<T>,
    pub h: Vec<T>,
    pub children: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct ModuleIds {
    fc_w: ParamId,
    fc_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FusionIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// Parameter handles and forward pass of the prompt builder.
#[derive(Clone, Debug)]
pub struct TreePrompt {
    pub config: TreePromptConfig,
    word: Option<ParamId>,
    pos: Option<ParamId>,
    dep: Option<ParamId>,
    modules: Vec<ModuleIds>,
    pos_embed: Option<ParamId>,
    global: ParamId,
    fusion: Option<FusionIds>,
}

pub const GLOBAL_PROMPT: &str = "prompt.global";

fn module_prefix(config: &TreePromptConfig) -> Vec<&'static str> {
    if config.modules_enabled {
        vec!["tree.leaf", "tree.rel", "tree.enti"]
    } else {
        vec!["tree.shared"]
    }
}

fn linear_init<T: Scalar, R: Rng + ?Sized>(d_out: usize, d_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng)
}

impl TreePrompt {
    /// Registers freshly initialised parameters in `store`.
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: TreePromptConfig,
        vocab: &Vocab,
        rng: &mut R,
    ) -> Result<Self, TreePromptError> {
        Self::validate(&config)?;
        let (dp, dn, std) = (config.d_p, config.d_n(), config.init_std);
        if !config.is_continuous() {
            store.insert("tree.emb.word", Tensor::randn(&[vocab.words.len(), config.d_w], std, rng))?;
            store.insert("tree.emb.pos", Tensor::randn(&[vocab.pos.len(), config.d_l], std, rng))?;
            store.insert("tree.emb.dep", Tensor::randn(&[vocab.deps.len(), config.d_l], std, rng))?;
            for prefix in module_prefix(&config) {
                store.insert(format!("{prefix}.fc.w"), linear_init(dp, dn, rng))?;
                store.insert(format!("{prefix}.fc.b"), Tensor::zeros(&[dp]))?;
                store.insert(format!("{prefix}.mlp.w1"), linear_init(dp, 2 * dp, rng))?;
                store.insert(format!("{prefix}.mlp.b1"), Tensor::zeros(&[dp]))?;
                store.insert(format!("{prefix}.mlp.w2"), linear_init(dp, dp, rng))?;
                store.insert(format!("{prefix}.mlp.b2"), Tensor::zeros(&[dp]))?;
            }
            store.insert("tree.pos_embed", Tensor::randn(&[config.max_tree_len, dp], std, rng))?;
            if config.fusion.projections {
                for name in ["fusion.wq", "fusion.wk", "fusion.wv"] {
                    store.insert(name, linear_init(dp, dp, rng))?;
                }
            }
        }
        store.insert(GLOBAL_PROMPT, Tensor::randn(&[config.prompt_len, dp], std, rng))?;
        Self::attach(store, config)
    }

    /// Resolves parameter handles from an existing store.
    pub fn attach<T: Scalar>(store: &ParamStore<T>, config: TreePromptConfig) -> Result<Self, TreePromptError> {
        Self::validate(&config)?;
        let find = |name: &str| store.id(name).ok_or_else(|| TreePromptError::MissingParam(name.to_string()));
        let global = find(GLOBAL_PROMPT)?;
        let shape = store.get(global).shape();
        if shape != [config.prompt_len, config.d_p] {
            return Err(TreePromptError::Config(format!("global prompt has shape {shape:?}")));
        }
        if config.is_continuous() {
            return Ok(TreePrompt { config, word: None, pos: None, dep: None, modules: vec![], pos_embed: None, global, fusion: None });
        }
        let mut modules = Vec::new();
        for prefix in module_prefix(&config) {
            modules.push(ModuleIds {
                fc_w: find(&format!("{prefix}.fc.w"))?,
                fc_b: find(&format!("{prefix}.fc.b"))?,
                w1: find(&format!("{prefix}.mlp.w1"))?,
                b1: find(&format!("{prefix}.mlp.b1"))?,
                w2: find(&format!("{prefix}.mlp.w2"))?,
                b2: find(&format!("{prefix}.mlp.b2"))?,
            });
        }
        let fusion = if config.fusion.projections {
            Some(FusionIds { wq: find("fusion.wq")?, wk: find("fusion.wk")?, wv: find("fusion.wv")? })
        } else {
            None
        };
        Ok(TreePrompt {
            word: Some(find("tree.emb.word")?),
            pos: Some(find("tree.emb.pos")?),
            dep: Some(find("tree.emb.dep")?),
            modules,
            pos_embed: Some(find("tree.pos_embed")?),
            global,
            fusion,
            config,
        })
    }

    fn validate(config: &TreePromptConfig) -> Result<(), TreePromptError> {
        let heads = config.fusion.heads;
        if heads == 0 || config.d_p % heads != 0 {
            return Err(TreePromptError::Config(format!("{} heads do not divide d_p = {}", heads, config.d_p)));
        }
        if config.d_p == 0 || config.max_tree_len == 0 {
            return Err(TreePromptError::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Every parameter the prompt builder owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = [self.word, self.pos, self.dep, self.pos_embed].into_iter().flatten().collect();
        for m in &self.modules {
            ids.extend([m.fc_w, m.fc_b, m.w1, m.b1, m.w2, m.b2]);
        }
        if let Some(f) = self.fusion {
            ids.extend([f.wq, f.wk, f.wv]);
        }
        ids.push(self.global);
        ids.sort();
        ids
    }

    pub fn global_id(&self) -> ParamId {
        self.global
    }

    fn module(&self, kind: ModuleKind) -> &ModuleIds {
        if self.config.modules_enabled {
            &self.modules[match kind {
                ModuleKind::Leaf => 0,
                ModuleKind::Rel => 1,
                ModuleKind::Enti => 2,
            }]
        } else {
            &self.modules[0]
        }
    }

    fn need(id: Option<ParamId>, what: &str) -> Result<ParamId, TreePromptError> {
        id.ok_or_else(|| TreePromptError::Config(format!("{what} is not used by a continuous prompt")))
    }

    pub fn tables<T: Scalar>(&self, store: &ParamStore<T>) -> Result<EmbeddingTables<T>, TreePromptError> {
        Ok(EmbeddingTables {
            word: store.get(Self::need(self.word, "word table")?).clone(),
            pos: store.get(Self::need(self.pos, "pos table")?).clone(),
            dep: store.get(Self::need(self.dep, "dep table")?).clone(),
        })
    }

    /// Per-kind module weights; with modules disabled all three are the shared set.
    pub fn module_params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<ModuleParams<T>, TreePromptError> {
        if self.modules.is_empty() {
            return Err(TreePromptError::Config("continuous prompt has no modules".into()));
        }
        let net = |kind| {
            let m = self.module(kind);
            ModuleNet {
                fc_w: store.get(m.fc_w).clone(),
                fc_b: store.get(m.fc_b).data().to_vec(),
                mlp: Mlp2 {
                    w1: store.get(m.w1).clone(),
                    b1: store.get(m.b1).data().to_vec(),
                    w2: store.get(m.w2).clone(),
                    b2: store.get(m.b2).data().to_vec(),
                },
            }
        };
        Ok(ModuleParams { leaf: net(ModuleKind::Leaf), rel: net(ModuleKind::Rel), enti: net(ModuleKind::Enti) })
    }

    /// Node embedding on the tape, `1×d_n`.
    pub fn embed_node<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: NodeIds) -> Result<Var, TreePromptError> {
        let word = g.param(Self::need(self.word, "word table")?);
        let pos = g.param(Self::need(self.pos, "pos table")?);
        let dep = g.param(Self::need(self.dep, "dep table")?);
        let w = g.gather_rows(word, &[ids.word])?;
        let t = g.gather_rows(pos, &[ids.pos])?;
        let l = g.gather_rows(dep, &[ids.dep])?;
        Ok(g.concat_cols(&[w, t, l])?)
    }

    /// `r = FC_kind(L2Norm(n))` on the tape.
    pub fn node_representation<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        n: Var,
        kind: ModuleKind,
    ) -> Result<Var, TreePromptError> {
        let m = *self.module(kind);
        let unit = g.l2norm_rows(n);
        let (w, b) = (g.param(m.fc_w), g.param(m.fc_b));
        let lin = g.matmul_nt(unit, w)?;
        Ok(g.add_row(lin, b)?)
    }

    /// `h = MLP_kind([mean(children); r])` on the tape, enforcing the routing contract.
    pub fn compose_node_prompt<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        index: usize,
        r: Var,
        children: &[Var],
        kind: ModuleKind,
    ) -> Result<Var, TreePromptError> {
        match (kind, children.is_empty()) {
            (ModuleKind::Leaf, false) => Err(TreePromptError::LeafWithChildren { index }),
            (ModuleKind::Rel | ModuleKind::Enti, true) => Err(TreePromptError::NonLeafWithoutChildren { index }),
            _ => self.compose_unchecked(g, r, children, kind),
        }
    }

    fn compose_unchecked<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        r: Var,
        children: &[Var],
        kind: ModuleKind,
    ) -> Result<Var, TreePromptError> {
        let mean = if children.is_empty() {
            g.constant(Tensor::zeros(&[1, self.config.d_p]))
        } else if children.len() == 1 {
            children[0]
        } else {
            let stacked = g.concat_rows(children)?;
            g.mean_rows(stacked)?
        };
        let f = g.concat_cols(&[mean, r])?;
        let m = *self.module(kind);
        let (w1, b1, w2, b2) = (g.param(m.w1), g.param(m.b1), g.param(m.w2), g.param(m.b2));
        let hidden = g.matmul_nt(f, w1)?;
        let hidden = g.add_row(hidden, b1)?;
        let hidden = g.relu(hidden);
        let out = g.matmul_nt(hidden, w2)?;
        Ok(g.add_row(out, b2)?)
    }

    /// Bottom-up composition over the whole tree. Results are indexed by
    /// token position (`result[i]` is node `i + 1`).
    pub fn compose_tree<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tree: &DepTree,
        vocab: &Vocab,
    ) -> Result<Vec<NodeVars>, TreePromptError> {
        let mut out: Vec<Option<NodeVars>> = vec![None; tree.len()];
        for idx in tree.postorder() {
            let node = tree.node(idx);
            let kind = route_module(node);
            let n = self.embed_node(g, vocab.node_ids(node))?;
            let r = self.node_representation(g, n, kind)?;
            let child_h: Vec<Var> = node.children.iter().map(|&c| out[c - 1].as_ref().expect("post-order").h).collect();
            let h = self.compose_node_prompt(g, idx, r, &child_h, kind)?;
            out[idx - 1] = Some(NodeVars { index: idx, kind, r, h, children: node.children.clone() });
        }
        Ok(out.into_iter().map(|n| n.expect("every node visited")).collect())
    }

    /// Per-token prompts without child aggregation (tree composition disabled).
    pub fn compose_tokens<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tree: &DepTree,
        vocab: &Vocab,
    ) -> Result<Vec<NodeVars>, TreePromptError> {
        let mut out = Vec::with_capacity(tree.len());
        for node in tree.nodes() {
            let kind = route_module(node);
            let n = self.embed_node(g, vocab.node_ids(node))?;
            let r = self.node_representation(g, n, kind)?;
            let h = self.compose_unchecked(g, r, &[], kind)?;
            out.push(NodeVars { index: node.index, kind, r, h, children: node.children.clone() });
        }
        Ok(out)
    }

    /// Stacks node prompts into `H` (pre-order with tree composition, sentence
    /// order without) and adds the positional embedding.
    pub fn order_prompts<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        nodes: &[NodeVars],
        tree: &DepTree,
    ) -> Result<Var, TreePromptError> {
        let m = nodes.len();
        if m > self.config.max_tree_len {
            return Err(TreePromptError::SentenceTooLong { len: m, max: self.config.max_tree_len });
        }
        let order: Vec<usize> = if self.config.tree_enabled { tree.preorder() } else { (1..=m).collect() };
        let rows: Vec<Var> = order.iter().map(|&i| nodes[i - 1].h).collect();
        self.stack_with_positions(g, &rows)
    }

    /// `H` from arbitrary prompt rows, with positions 0..rows.len().
    pub fn stack_with_positions<T: Scalar>(&self, g: &mut Graph<'_, T>, rows: &[Var]) -> Result<Var, TreePromptError> {
        if rows.len() > self.config.max_tree_len {
            return Err(TreePromptError::SentenceTooLong { len: rows.len(), max: self.config.max_tree_len });
        }
        let h = g.concat_rows(rows)?;
        let table = g.param(Self::need(self.pos_embed, "positional embedding")?);
        let pos = g.slice_rows(table, 0, rows.len())?;
        Ok(g.add(h, pos)?)
    }

    /// `[_; P] = Attn([H; G])`: returns the `N` rows at the global positions.
    pub fn fuse_with_global<T: Scalar>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<Var, TreePromptError> {
        let (m, dp) = (g.value(h).rows(), self.config.d_p);
        if g.value(h).cols() != dp {
            return Err(TreePromptError::Numerics(crate::numerics::NumericsError::ShapeMismatch {
                op: "fuse_with_global",
                detail: format!("H has {} columns, d_p = {dp}", g.value(h).cols()),
            }));
        }
        let gp = g.param(self.global);
        let n = g.value(gp).rows();
        let x = g.concat_rows(&[h, gp])?;
        let (q, k, v) = match self.fusion {
            Some(f) => {
                let (wq, wk, wv) = (g.param(f.wq), g.param(f.wk), g.param(f.wv));
                (g.matmul_nt(x, wq)?, g.matmul_nt(x, wk)?, g.matmul_nt(x, wv)?)
            }
            None => (x, x, x),
        };
        let q = match self.config.fusion.mode {
            FusionMode::SelfAttention => q,
            FusionMode::GlobalQueries => g.slice_rows(q, m, m + n)?,
        };
        let heads = self.config.fusion.heads;
        let out = if heads == 1 {
            g.attention(q, k, v)?
        } else {
            let hd = dp / heads;
            let mut parts = Vec::with_capacity(heads);
            for i in 0..heads {
                let qs = g.slice_cols(q, i * hd, (i + 1) * hd)?;
                let ks = g.slice_cols(k, i * hd, (i + 1) * hd)?;
                let vs = g.slice_cols(v, i * hd, (i + 1) * hd)?;
                parts.push(g.attention(qs, ks, vs)?);
            }
            g.concat_cols(&parts)?
        };
        Ok(match self.config.fusion.mode {
            FusionMode::SelfAttention => g.slice_rows(out, m, m + n)?,
            FusionMode::GlobalQueries => out,
        })
    }

    /// Full prompt for one sentence: `P` (`N×d_p`) plus the per-node handles
    /// (empty for the continuous baseline).
    pub fn prompt<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        tree: &DepTree,
        vocab: &Vocab,
    ) -> Result<(Var, Vec<NodeVars>), TreePromptError> {
        if self.config.is_continuous() {
            return Ok((g.param(self.global), Vec::new()));
        }
        let nodes = if self.config.tree_enabled {
            self.compose_tree(g, tree, vocab)?
        } else {
            self.compose_tokens(g, tree, vocab)?
        };
        let h = self.order_prompts(g, &nodes, tree)?;
        let p = self.fuse_with_global(g, h)?;
        Ok((p, nodes))
    }

    /// Evaluates every node prompt without recording gradients.
    pub fn node_prompts<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tree: &DepTree,
        vocab: &Vocab,
    ) -> Result<Vec<NodePrompt<T>>, TreePromptError> {
        let mut g = Graph::inference(store);
        let nodes = if self.config.tree_enabled {
            self.compose_tree(&mut g, tree, vocab)?
        } else {
            self.compose_tokens(&mut g, tree, vocab)?
        };
        Ok(nodes
            .into_iter()
            .map(|n| NodePrompt {
                index: n.index,
                kind: n.kind,
                r: g.value(n.r).data().to_vec(),
                h: g.value(n.h).data().to_vec(),
                children: n.children,
            })
            .collect())
    }
}
