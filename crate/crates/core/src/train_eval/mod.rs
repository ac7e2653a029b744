//! Prompt tuning against the frozen backbone, evaluation, ablations and
//! convergence logs.

mod ablate;
mod convergence;
mod model;

pub use ablate::{ablate, AblationCell, AblationConfig, AblationReport, LengthRow, ABLATION_ROWS, SWEEP_LENGTHS};
pub use convergence::{log_convergence, smooth, ConvergenceLog};
pub use model::PromptedModel;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::grounder::{iou, BBox, Dataset, FrozenBackbone, GrounderError, GroundingExample, Split};
use crate::injection::{InjectionError, PromptMode};
use crate::numerics::{batch_gradients, AdamW, AdamWConfig, NumericsError, ParamGrads, ParamId, ParamStore, Tensor};
use crate::tree_prompt::{FusionConfig, TreePromptConfig, TreePromptError};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("frozen parameters received gradients: {0:?}")]
    FrozenViolation(Vec<String>),
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error(transparent)]
    TreePrompt(#[from] TreePromptError),
    #[error(transparent)]
    Grounder(#[from] GrounderError),
    #[error(transparent)]
    Injection(#[from] InjectionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub prompt_mode: PromptMode,
    /// Global prompt length `N`.
    pub prompt_len: usize,
    pub tree_enabled: bool,
    pub modules_enabled: bool,
    pub lr_tree: f64,
    pub lr_global_multilayer: f64,
    pub batch_tree: usize,
    pub batch_global: usize,
    pub epochs_global: usize,
    pub epochs_tree: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub d_w: usize,
    pub d_l: usize,
    pub max_tree_len: usize,
    pub init_std: f64,
    pub fusion: FusionConfig,
    /// Use at most this many training examples.
    pub train_limit: Option<usize>,
    /// Evaluate on at most this many examples per split.
    pub eval_limit: Option<usize>,
    /// Pretrained word vectors for the word table.
    pub word_vectors: Option<std::path::PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            prompt_mode: PromptMode::Input,
            prompt_len: 64,
            tree_enabled: true,
            modules_enabled: true,
            lr_tree: 5e-5,
            lr_global_multilayer: 0.03,
            batch_tree: 8,
            batch_global: 16,
            epochs_global: 100,
            epochs_tree: 20,
            weight_decay: 0.01,
            seed: 0,
            d_w: 32,
            d_l: 8,
            max_tree_len: 32,
            init_std: 0.02,
            fusion: FusionConfig::default(),
            train_limit: None,
            eval_limit: None,
            word_vectors: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.prompt_len == 0 {
            return bad("prompt_len must be positive");
        }
        if self.batch_tree == 0 || self.batch_global == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr_tree >= 0.0 && self.lr_global_multilayer >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        Ok(())
    }

    pub fn tree_prompt_config(&self, d_p: usize) -> TreePromptConfig {
        TreePromptConfig {
            d_w: self.d_w,
            d_l: self.d_l,
            d_p,
            prompt_len: self.prompt_len,
            max_tree_len: self.max_tree_len,
            tree_enabled: self.tree_enabled,
            modules_enabled: self.modules_enabled,
            fusion: self.fusion.clone(),
            init_std: self.init_std,
        }
    }

    /// Name of the ablation row this configuration belongs to.
    pub fn variant(&self) -> &'static str {
        match (self.tree_enabled, self.modules_enabled) {
            (true, true) => "full",
            (false, true) => "w/o tree",
            (true, false) => "w/o module",
            (false, false) => "continuous",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPretuneReport {
    pub epochs: usize,
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub variant: String,
    /// Mean batch loss before each optimiser step.
    pub step_losses: Vec<f64>,
    /// Validation accuracy before training (index 0) and after each epoch.
    pub epoch_val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    pub test_accuracy: BTreeMap<String, f64>,
    pub seconds: f64,
    pub tuned_parameters: usize,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_pretune: Option<GlobalPretuneReport>,
}

fn limit<'a>(examples: &'a [GroundingExample], cap: Option<usize>) -> &'a [GroundingExample] {
    &examples[..cap.map_or(examples.len(), |c| c.min(examples.len()))]
}

/// Fraction of examples whose predicted box has IoU > 0.5 with the gold box.
pub fn evaluate<F>(examples: &[GroundingExample], predict: F) -> Result<f64, TrainError>
where
    F: Fn(&GroundingExample) -> Result<BBox, TrainError> + Sync,
{
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation".into()));
    }
    let hits = examples
        .par_iter()
        .map(|e| Ok(usize::from(iou(&predict(e)?, &e.gold_box)? > 0.5)))
        .collect::<Result<Vec<usize>, TrainError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

pub fn evaluate_model<T: Scalar>(model: &PromptedModel<T>, examples: &[GroundingExample]) -> Result<f64, TrainError> {
    evaluate(examples, |e| Ok(e.scene.region(model.predict(e)?)))
}

fn audit<T: Scalar>(grads: &ParamGrads<T>, store: &ParamStore<T>, frozen: &[ParamId]) -> Result<(), TrainError> {
    let bad: Vec<String> = frozen
        .iter()
        .filter(|&&id| grads.get(id).is_some_and(|g| g.data().iter().any(|v| *v != T::zero())))
        .map(|&id| store.name(id).to_string())
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(TrainError::FrozenViolation(bad))
    }
}

fn frozen_ids(mask: &[bool]) -> Vec<ParamId> {
    (0..mask.len()).filter(|&i| !mask[i]).map(ParamId).collect()
}

/// Trains the global multi-layer prompt alone (everything else frozen) and
/// returns it for later use as the frozen `P_g`.
pub fn pretune_global<T: Scalar>(
    frozen: &FrozenBackbone<T>,
    dataset: &Dataset,
    config: &RunConfig,
) -> Result<(Tensor<T>, GlobalPretuneReport), TrainError> {
    let cfg = RunConfig { prompt_mode: PromptMode::Multi, ..config.clone() };
    let mut model = PromptedModel::build(frozen, &cfg, None)?;
    let mask = model.global_ml_mask().expect("multi-layer run");
    let gid = model.global_ml.as_ref().expect("multi-layer run").id;
    let frozen_list = frozen_ids(&mask);
    let train = limit(dataset.split(Split::TuneTrain), cfg.train_limit);
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::TuneTrain.to_string()));
    }
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr_global_multilayer, weight_decay: cfg.weight_decay, ..Default::default() }, model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::new();
    for _ in 0..cfg.epochs_global {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_global) {
            let items: Vec<&GroundingExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut grads, loss) = batch_gradients(&model.store, &mask, &items, |g, e| {
                let scores = model.forward_global_only(g, &e.tree, &e.scene)?;
                Ok::<_, TrainError>(g.cross_entropy(scores, e.gold)?)
            })?;
            audit(&grads, &model.store, &frozen_list)?;
            total += loss;
            grads.scale(T::one() / T::from_usize_lossy(items.len()));
            let dense = grads.densify(&model.store, &mask);
            opt.step(&mut model.store, &dense);
        }
        epoch_loss.push(total / train.len() as f64);
    }
    let val = limit(dataset.split(Split::TuneVal), cfg.eval_limit);
    let val_accuracy = if val.is_empty() {
        0.0
    } else {
        let m = &model;
        evaluate(val, |e| {
            let mut g = crate::numerics::Graph::inference(&m.store);
            let s = m.forward_global_only(&mut g, &e.tree, &e.scene)?;
            Ok(e.scene.region(crate::grounder::argmax(g.value(s).data())))
        })?
    };
    let report = GlobalPretuneReport { epochs: cfg.epochs_global, epoch_loss, val_accuracy };
    Ok((model.store.get(gid).clone(), report))
}

/// Tunes the prompt-side parameters; keeps the epoch with the best
/// validation accuracy (the untrained state counts as epoch 0).
pub fn tune<T: Scalar>(
    frozen: &FrozenBackbone<T>,
    dataset: &Dataset,
    config: &RunConfig,
    global_ml: Option<&Tensor<T>>,
) -> Result<(RunReport, PromptedModel<T>), TrainError> {
    let start = Instant::now();
    if config.prompt_mode == PromptMode::Multi && global_ml.is_none() {
        return Err(TrainError::Config("multi-layer tuning needs a pretuned global prompt".into()));
    }
    let mut model = PromptedModel::build(frozen, config, global_ml)?;
    let hash_before = model.backbone_hash();
    let mask = model.trainable_mask();
    let frozen_list = frozen_ids(&mask);
    let tuned_ids = model.tuned_ids();
    let train = limit(dataset.split(Split::TuneTrain), config.train_limit);
    let val = limit(dataset.split(Split::TuneVal), config.eval_limit);
    if train.is_empty() {
        return Err(TrainError::EmptySplit(Split::TuneTrain.to_string()));
    }
    let mut opt = AdamW::new(AdamWConfig { lr: config.lr_tree, weight_decay: config.weight_decay, ..Default::default() }, model.store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step_losses = Vec::new();
    let mut val_acc = vec![evaluate_model(&model, val)?];
    let snapshot = |m: &PromptedModel<T>| tuned_ids.iter().map(|&id| m.store.get(id).clone()).collect::<Vec<_>>();
    let mut best = (val_acc[0], 0usize, snapshot(&model));
    for epoch in 1..=config.epochs_tree {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_tree) {
            let items: Vec<&GroundingExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (mut grads, loss) = batch_gradients(&model.store, &mask, &items, |g, e| model.loss(g, e))?;
            audit(&grads, &model.store, &frozen_list)?;
            step_losses.push(loss / items.len() as f64);
            grads.scale(T::one() / T::from_usize_lossy(items.len()));
            let dense = grads.densify(&model.store, &mask);
            opt.step(&mut model.store, &dense);
        }
        let acc = evaluate_model(&model, val)?;
        log::info!("{} seed {} epoch {epoch}: val acc {acc:.4}", config.variant(), config.seed);
        val_acc.push(acc);
        if acc > best.0 {
            best = (acc, epoch, snapshot(&model));
        }
    }
    for (id, t) in tuned_ids.iter().zip(best.2) {
        *model.store.get_mut(*id) = t;
    }
    let hash_after = model.backbone_hash();
    if hash_after != hash_before {
        return Err(TrainError::FrozenViolation(vec!["backbone hash changed".into()]));
    }
    let mut test_accuracy = BTreeMap::new();
    for split in [Split::TuneTestSimple, Split::TuneTestCompositional] {
        let ex = limit(dataset.split(split), config.eval_limit);
        if !ex.is_empty() {
            test_accuracy.insert(split.to_string(), evaluate_model(&model, ex)?);
        }
    }
    let report = RunReport {
        config: config.clone(),
        seed: config.seed,
        variant: config.variant().into(),
        step_losses,
        epoch_val_accuracy: val_acc,
        best_epoch: best.1,
        test_accuracy,
        seconds: start.elapsed().as_secs_f64(),
        tuned_parameters: tuned_ids.iter().map(|&id| model.store.get(id).len()).sum(),
        backbone_hash_before: hash_before,
        backbone_hash_after: hash_after,
        global_pretune: None,
    };
    Ok((report, model))
}
