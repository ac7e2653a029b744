//! A frozen backbone together with the prompt-side parameters of one run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RunConfig, TrainError};
use crate::conllu::DepTree;
use crate::grounder::{argmax, Backbone, ForwardInfo, FrozenBackbone, GroundingExample, PromptInput, Scene};
use crate::injection::{GlobalMultiPrompt, MultiLayerExpander, PromptMode};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::tree_prompt::{NodeVars, TreePrompt, Vocab, WordVectors};
use crate::Scalar;

#[derive(Clone, Debug)]
pub struct PromptedModel<T> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub tree: TreePrompt,
    pub expander: Option<MultiLayerExpander>,
    pub global_ml: Option<GlobalMultiPrompt>,
    pub vocab: Vocab,
    pub config: RunConfig,
    backbone_ids: Vec<ParamId>,
}

impl<T: Scalar> PromptedModel<T> {
    /// Registers fresh prompt parameters (seeded by `config.seed`) next to a
    /// copy of the frozen backbone. Multi-layer mode needs the pretuned
    /// global multi-layer prompt.
    pub fn build(frozen: &FrozenBackbone<T>, config: &RunConfig, global_ml: Option<&Tensor<T>>) -> Result<Self, TrainError> {
        config.validate()?;
        let mut store = frozen.store.clone();
        let backbone_ids = frozen.backbone.param_ids(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tp_config = config.tree_prompt_config(frozen.backbone.config.d_model);
        let tree = TreePrompt::register(&mut store, tp_config, &frozen.vocab, &mut rng)?;
        if let Some(path) = &config.word_vectors {
            let wv = WordVectors::<T>::load(path)?;
            let found = wv.apply(&tree, &mut store, &frozen.vocab)?;
            log::info!("word vectors cover {found} of {} words", frozen.vocab.words.len() - 1);
        }
        let (expander, gml) = match config.prompt_mode {
            PromptMode::Input => (None, None),
            PromptMode::Multi => {
                let layers = frozen.backbone.config.layers;
                let d = frozen.backbone.config.d_model;
                let e = MultiLayerExpander::register(&mut store, d, layers, &mut rng)?;
                let gm = GlobalMultiPrompt::register(&mut store, layers, config.prompt_len, d, config.init_std, &mut rng)?;
                if let Some(t) = global_ml {
                    if t.shape() != store.get(gm.id).shape() {
                        return Err(TrainError::Config(format!("pretuned global prompt has shape {:?}", t.shape())));
                    }
                    *store.get_mut(gm.id) = t.clone();
                }
                (Some(e), Some(gm))
            }
        };
        Ok(PromptedModel {
            store,
            backbone: frozen.backbone.clone(),
            tree,
            expander,
            global_ml: gml,
            vocab: frozen.vocab.clone(),
            config: config.clone(),
            backbone_ids,
        })
    }

    pub fn backbone_ids(&self) -> &[ParamId] {
        &self.backbone_ids
    }

    pub fn backbone_hash(&self) -> String {
        self.store.subset(&self.backbone_ids).hash()
    }

    /// Prompt-side parameters updated during tuning. The pretuned global
    /// multi-layer prompt stays frozen.
    pub fn tuned_ids(&self) -> Vec<ParamId> {
        let mut ids = self.tree.param_ids();
        if let Some(e) = &self.expander {
            ids.extend(e.param_ids());
        }
        ids.sort();
        ids
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        mask_of(&self.store, &self.tuned_ids())
    }

    /// Mask that trains only the global multi-layer prompt.
    pub fn global_ml_mask(&self) -> Option<Vec<bool>> {
        self.global_ml.as_ref().map(|gm| mask_of(&self.store, &[gm.id]))
    }

    pub fn prompt_store(&self) -> ParamStore<T> {
        let mut ids = self.tuned_ids();
        if let Some(gm) = &self.global_ml {
            ids.push(gm.id);
        }
        ids.sort();
        self.store.subset(&ids)
    }

    /// Region scores with the run's prompt; also returns instrumentation and
    /// the per-node handles.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        tree: &DepTree,
        scene: &Scene,
    ) -> Result<(Var, ForwardInfo, Vec<NodeVars>), TrainError> {
        let (p, nodes) = self.tree.prompt(g, tree, &self.vocab)?;
        let prompt = self.deliver(g, p)?;
        let ids = self.vocab.word_ids(&tree.words());
        let (scores, info) = self.backbone.forward(g, &ids, &FrozenBackbone::features(scene), &prompt)?;
        Ok((scores, info, nodes))
    }

    /// Turns a fused prompt `P` into the backbone payload for the run's mode.
    pub fn deliver(&self, g: &mut Graph<'_, T>, p: Var) -> Result<PromptInput, TrainError> {
        Ok(match (&self.expander, &self.global_ml) {
            (Some(e), Some(gm)) => {
                let ex = e.expand(g, p)?;
                let global = gm.layers(g)?;
                PromptInput::Multi(e.layer_prompts(g, ex, Some(&global))?)
            }
            _ => PromptInput::Input(p),
        })
    }

    /// Global multi-layer prompt alone, as used while pretuning it.
    pub fn forward_global_only(&self, g: &mut Graph<'_, T>, tree: &DepTree, scene: &Scene) -> Result<Var, TrainError> {
        let gm = self.global_ml.as_ref().ok_or_else(|| TrainError::Config("not a multi-layer run".into()))?;
        let prompt = PromptInput::Multi(gm.layers(g)?);
        let ids = self.vocab.word_ids(&tree.words());
        Ok(self.backbone.forward(g, &ids, &FrozenBackbone::features(scene), &prompt)?.0)
    }

    pub fn loss(&self, g: &mut Graph<'_, T>, e: &GroundingExample) -> Result<Var, TrainError> {
        let (scores, _, _) = self.forward(g, &e.tree, &e.scene)?;
        Ok(g.cross_entropy(scores, e.gold)?)
    }

    pub fn predict(&self, e: &GroundingExample) -> Result<usize, TrainError> {
        let mut g = Graph::inference(&self.store);
        let (scores, _, _) = self.forward(&mut g, &e.tree, &e.scene)?;
        Ok(argmax(g.value(scores).data()))
    }
}

fn mask_of<T: Scalar>(store: &ParamStore<T>, ids: &[ParamId]) -> Vec<bool> {
    let mut m = vec![false; store.len()];
    for id in ids {
        m[id.index()] = true;
    }
    m
}

impl<T: Scalar> PromptedModel<T> {
    /// Overwrites prompt-side parameters from a tuned checkpoint. Backbone
    /// names and names the run does not declare are rejected.
    pub fn load_prompt(&mut self, prompt: &ParamStore<T>) -> Result<(), TrainError> {
        for (_, name, t) in prompt.iter() {
            if name.starts_with(crate::grounder::backbone::PREFIX) {
                return Err(TrainError::Config(format!("prompt checkpoint contains backbone parameter `{name}`")));
            }
            let id = self.store.id(name).ok_or_else(|| TrainError::Config(format!("unexpected parameter `{name}`")))?;
            if self.store.get(id).shape() != t.shape() {
                return Err(TrainError::Config(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), self.store.get(id).shape())));
            }
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }
}
