use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{argmax, Backbone, BackboneConfig, PromptInput};
use super::dataset::{Dataset, GroundingExample, Split};
use super::world::Scene;
use super::GrounderError;
use crate::numerics::{batch_gradients, checkpoint, AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::tree_prompt::Vocab;
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop once held-out simple accuracy reaches this.
    pub target: f64,
    /// Below this after the budget the run fails.
    pub floor: f64,
    /// Fraction of the pretraining split held out for the stopping rule.
    pub holdout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { lr: 1e-3, weight_decay: 0.01, batch: 32, max_epochs: 30, target: 0.95, floor: 0.80, holdout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub holdout_accuracy: Vec<f64>,
    pub simple_test_accuracy: f64,
    /// Zero-shot accuracy without prompts on compositional queries.
    pub compositional_floor: f64,
    pub parameters: usize,
    pub seconds: f64,
    pub hash: String,
}

/// Backbone weights with the vocabulary they were trained against.
#[derive(Clone, Debug)]
pub struct FrozenBackbone<T> {
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub vocab: Vocab,
}

pub const CHECKPOINT_FILE: &str = "backbone.tpck";
pub const VOCAB_FILE: &str = "vocab.json";

impl<T: Scalar> FrozenBackbone<T> {
    pub fn hash(&self) -> String {
        self.store.hash()
    }

    pub fn features(scene: &Scene) -> Tensor<T> {
        let rows = scene.features();
        let cols = rows.first().map_or(0, Vec::len);
        Tensor::from_f64(&[rows.len(), cols], &rows.concat())
    }

    pub fn text_ids(&self, e: &GroundingExample) -> Vec<usize> {
        self.vocab.word_ids(&e.tree.words())
    }

    pub fn save(&self, dir: &Path) -> Result<(), GrounderError> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::json!({ "backbone": self.backbone.config, "frozen": true });
        checkpoint::save(&self.store, &dir.join(CHECKPOINT_FILE), meta)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, GrounderError> {
        let (store, manifest) = checkpoint::load::<T>(&dir.join(CHECKPOINT_FILE))?;
        let manifest = manifest.ok_or_else(|| GrounderError::Config("backbone checkpoint has no manifest".into()))?;
        let config: BackboneConfig = serde_json::from_value(manifest.meta["backbone"].clone())?;
        let backbone = Backbone::attach(&store, config)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        Ok(FrozenBackbone { store, backbone, vocab })
    }
}

/// Region scores and the predicted index for a query without prompts.
pub fn score_regions<T: Scalar>(fb: &FrozenBackbone<T>, scene: &Scene, words: &[&str]) -> Result<(Vec<T>, usize), GrounderError> {
    let mut g = Graph::inference(&fb.store);
    let ids = fb.vocab.word_ids(words);
    let (scores, _) = fb.backbone.forward(&mut g, &ids, &FrozenBackbone::features(scene), &PromptInput::None)?;
    let s = g.value(scores).data().to_vec();
    let best = argmax(&s);
    Ok((s, best))
}

fn accuracy<T: Scalar>(fb: &FrozenBackbone<T>, examples: &[&GroundingExample]) -> Result<f64, GrounderError> {
    use rayon::prelude::*;
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = examples
        .par_iter()
        .map(|e| Ok(usize::from(score_regions(fb, &e.scene, &e.tree.words())?.1 == e.gold)))
        .collect::<Result<Vec<usize>, GrounderError>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

/// Trains every backbone parameter on simple queries until the held-out
/// accuracy reaches the target or the epoch budget runs out.
pub fn pretrain_backbone<T: Scalar>(
    dataset: &Dataset,
    config: BackboneConfig,
    pcfg: &PretrainConfig,
    seed: u64,
) -> Result<(FrozenBackbone<T>, PretrainReport), GrounderError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::new();
    let backbone = Backbone::register(&mut store, config, &mut rng)?;
    let vocab = dataset.vocab();
    if vocab.words.len() != backbone.config.vocab_size {
        return Err(GrounderError::Config(format!(
            "backbone vocab {} but dataset vocab {}",
            backbone.config.vocab_size,
            vocab.words.len()
        )));
    }
    let all: Vec<&GroundingExample> = dataset.split(Split::Pretrain).iter().collect();
    let n_hold = ((all.len() as f64) * pcfg.holdout).round() as usize;
    let (train, holdout) = all.split_at(all.len() - n_hold);
    if train.is_empty() {
        return Err(GrounderError::Config("empty pretraining split".into()));
    }
    let mut fb = FrozenBackbone { store, backbone, vocab };
    let trainable = vec![true; fb.store.len()];
    let mut opt = AdamW::new(AdamWConfig { lr: pcfg.lr, weight_decay: pcfg.weight_decay, ..Default::default() }, fb.store.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 0..pcfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(pcfg.batch.max(1)) {
            let items: Vec<&GroundingExample> = chunk.iter().map(|&i| train[i]).collect();
            let (mut grads, loss) = batch_gradients(&fb.store, &trainable, &items, |g, e| {
                let ids = fb.vocab.word_ids(&e.tree.words());
                let (scores, _) = fb.backbone.forward(g, &ids, &FrozenBackbone::features(&e.scene), &PromptInput::None)?;
                Ok::<_, GrounderError>(g.cross_entropy(scores, e.gold)?)
            })?;
            epoch_loss += loss;
            grads.scale(T::one() / T::from_usize_lossy(items.len()));
            let dense = grads.densify(&fb.store, &trainable);
            opt.step(&mut fb.store, &dense);
        }
        let acc = accuracy(&fb, holdout)?;
        log::info!("pretrain epoch {epoch}: loss {:.4} holdout acc {acc:.4}", epoch_loss / train.len() as f64);
        history.push(acc);
        if acc >= pcfg.target {
            break;
        }
    }
    let last = history.last().copied().unwrap_or(0.0);
    if last < pcfg.floor {
        return Err(GrounderError::ConvergenceFailure { accuracy: last, required: pcfg.floor });
    }
    let simple: Vec<&GroundingExample> = dataset.split(Split::TuneTestSimple).iter().collect();
    let comp: Vec<&GroundingExample> = dataset.split(Split::TuneTestCompositional).iter().collect();
    let report = PretrainReport {
        epochs: history.len(),
        simple_test_accuracy: accuracy(&fb, &simple)?,
        compositional_floor: accuracy(&fb, &comp)?,
        holdout_accuracy: history,
        parameters: fb.store.num_scalars(),
        seconds: start.elapsed().as_secs_f64(),
        hash: fb.hash(),
    };
    Ok((fb, report))
}
