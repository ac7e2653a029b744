//! Seeded generation of grounding examples and their JSON-lines form.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grammar::{compositional_query, simple_query};
use super::world::{iou, BBox, Color, Description, Object, Relation, Scene, Size, WorldConfig};
use super::GrounderError;
use crate::conllu::DepTree;
use crate::tree_prompt::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    TuneTrain,
    TuneVal,
    TuneTestSimple,
    TuneTestCompositional,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Pretrain, Split::TuneTrain, Split::TuneVal, Split::TuneTestSimple, Split::TuneTestCompositional];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::TuneTrain => "tune_train",
            Split::TuneVal => "tune_val",
            Split::TuneTestSimple => "tune_test_simple",
            Split::TuneTestCompositional => "tune_test_compositional",
        }
    }

    pub fn is_compositional(self) -> bool {
        matches!(self, Split::TuneTrain | Split::TuneVal | Split::TuneTestCompositional)
    }

    fn code(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Split::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub tune_train: usize,
    pub tune_val: usize,
    pub tune_test_simple: usize,
    pub tune_test_compositional: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { pretrain: 20_000, tune_train: 8_000, tune_val: 1_000, tune_test_simple: 1_000, tune_test_compositional: 1_000 }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::TuneTrain => self.tune_train,
            Split::TuneVal => self.tune_val,
            Split::TuneTestSimple => self.tune_test_simple,
            Split::TuneTestCompositional => self.tune_test_compositional,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub world: WorldConfig,
    pub sizes: SplitSizes,
    /// Fresh scenes tried per example before giving up.
    pub max_scenes: usize,
    /// Template draws per scene.
    pub max_draws: usize,
    pub p_color: f64,
    pub p_size: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { world: WorldConfig::default(), sizes: SplitSizes::default(), max_scenes: 50, max_draws: 100, p_color: 0.6, p_size: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingExample {
    pub id: String,
    pub split: Split,
    pub scene: Scene,
    pub query: String,
    #[serde(with = "inline_conllu")]
    pub tree: DepTree,
    /// Region index of the referent.
    pub gold: usize,
    pub gold_box: BBox,
    /// Other objects matching the head noun phrase alone.
    pub distractors: usize,
}

mod inline_conllu {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    use crate::conllu::{parse_conllu, serialize_conllu, DepTree};

    pub fn serialize<S: Serializer>(t: &DepTree, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&serialize_conllu(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DepTree, D::Error> {
        let text = String::deserialize(d)?;
        let mut trees = parse_conllu(&text).map_err(D::Error::custom)?;
        if trees.len() != 1 {
            return Err(D::Error::custom(format!("expected one sentence, found {}", trees.len())));
        }
        Ok(trees.remove(0))
    }
}

/// Objects satisfying "the X <rel1> the Y that is <rel2> the Z".
pub fn resolve_compositional(
    scene: &Scene,
    x: &Description,
    rel1: Relation,
    y: &Description,
    rel2: Relation,
    z: &Description,
) -> Vec<usize> {
    let ys: Vec<usize> = scene
        .matching(y)
        .into_iter()
        .filter(|&j| scene.matching(z).into_iter().any(|k| scene.relates(rel2, j, k)))
        .collect();
    scene.matching(x).into_iter().filter(|&i| ys.iter().any(|&j| scene.relates(rel1, i, j))).collect()
}

fn describe<R: Rng + ?Sized>(o: &Object, cfg: &DatasetConfig, rng: &mut R) -> Description {
    Description {
        shape: o.shape,
        color: rng.gen_bool(cfg.p_color).then_some(o.color),
        size: rng.gen_bool(cfg.p_size).then_some(o.size),
    }
}

fn example_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 40) | index as u64);
    rng
}

fn draw_simple<R: Rng + ?Sized>(scene: &Scene, cfg: &DatasetConfig, rng: &mut R) -> Option<(usize, Description)> {
    let target = rng.gen_range(0..scene.objects.len());
    let o = &scene.objects[target];
    let d = describe(o, cfg, rng);
    if scene.matching(&d).len() == 1 {
        return Some((target, d));
    }
    let full = Description::full(o);
    (scene.matching(&full).len() == 1).then_some((target, full))
}

type Composite = (usize, Description, Relation, Description, Relation, Description);

fn draw_compositional<R: Rng + ?Sized>(scene: &Scene, cfg: &DatasetConfig, rng: &mut R) -> Option<Composite> {
    let target = rng.gen_range(0..scene.objects.len());
    let rel1 = *Relation::ALL.choose(rng)?;
    let y = *scene.partners(rel1, target).choose(rng)?;
    let rel2 = *Relation::ALL.choose(rng)?;
    let zs: Vec<usize> = scene.partners(rel2, y).into_iter().filter(|&k| k != target).collect();
    let z = *zs.choose(rng)?;
    let dx = describe(&scene.objects[target], cfg, rng);
    if scene.matching(&dx).len() < 2 {
        return None;
    }
    let dy = describe(&scene.objects[y], cfg, rng);
    let dz = describe(&scene.objects[z], cfg, rng);
    (resolve_compositional(scene, &dx, rel1, &dy, rel2, &dz) == [target]).then_some((target, dx, rel1, dy, rel2, dz))
}

/// Generates example `index` of `split`; a pure function of its arguments.
pub fn gen_example(seed: u64, split: Split, index: usize, cfg: &DatasetConfig) -> Result<GroundingExample, GrounderError> {
    let mut rng = example_rng(seed, split, index);
    let id = format!("{}-{index:05}", split.name());
    for _ in 0..cfg.max_scenes {
        let scene = Scene::generate(&cfg.world, &mut rng);
        for _ in 0..cfg.max_draws {
            let drawn = if split.is_compositional() {
                draw_compositional(&scene, cfg, &mut rng)
                    .map(|(t, x, r1, y, r2, z)| (t, x, compositional_query(&id, &x, r1, &y, r2, &z)))
            } else {
                draw_simple(&scene, cfg, &mut rng).map(|(t, x)| (t, x, simple_query(&id, &x)))
            };
            if let Some((gold, head, tree)) = drawn {
                let regions = scene.regions();
                for (i, r) in regions.iter().enumerate() {
                    if i != gold && iou(r, &regions[gold])? > 0.5 {
                        return Err(GrounderError::Config("overlapping regions".into()));
                    }
                }
                return Ok(GroundingExample {
                    query: tree.text(),
                    distractors: scene.matching(&head).len() - 1,
                    gold_box: regions[gold],
                    id,
                    split,
                    tree,
                    gold,
                    scene,
                });
            }
        }
    }
    Err(GrounderError::UnsatisfiableTemplate { split, index })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DatasetConfig,
    pub splits: BTreeMap<Split, Vec<GroundingExample>>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    config: DatasetConfig,
}

impl Dataset {
    pub fn generate(seed: u64, config: &DatasetConfig) -> Result<Self, GrounderError> {
        config.world.validate()?;
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let examples = (0..config.sizes.get(split))
                .into_par_iter()
                .map(|i| gen_example(seed, split, i, config))
                .collect::<Result<Vec<_>, _>>()?;
            splits.insert(split, examples);
        }
        Ok(Dataset { seed, config: config.clone(), splits })
    }

    pub fn split(&self, split: Split) -> &[GroundingExample] {
        self.splits.get(&split).map_or(&[], |v| v.as_slice())
    }

    /// Vocabulary over every tree in every split.
    pub fn vocab(&self) -> Vocab {
        Vocab::build(self.splits.values().flatten().map(|e| &e.tree), 1)
    }

    pub fn split_jsonl(&self, split: Split) -> Result<String, GrounderError> {
        let mut out = String::new();
        for e in self.split(split) {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `dataset.json` plus one `<split>.jsonl` per split into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), GrounderError> {
        fs::create_dir_all(dir)?;
        let manifest = DatasetManifest { seed: self.seed, config: self.config.clone() };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        for split in Split::ALL {
            let mut w = BufWriter::new(fs::File::create(dir.join(format!("{}.jsonl", split.name())))?);
            for e in self.split(split) {
                serde_json::to_writer(&mut w, e)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, GrounderError> {
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let path = dir.join(format!("{}.jsonl", split.name()));
            let mut examples = Vec::new();
            if path.exists() {
                for line in BufReader::new(fs::File::open(&path)?).lines() {
                    let line = line?;
                    if !line.trim().is_empty() {
                        examples.push(serde_json::from_str(&line)?);
                    }
                }
            }
            splits.insert(split, examples);
        }
        Ok(Dataset { seed: manifest.seed, config: manifest.config, splits })
    }
}

/// Colour and size words, used by attribute-only baselines.
pub fn attribute_words() -> Vec<&'static str> {
    Color::ALL.iter().map(|c| c.word()).chain(Size::ALL.iter().map(|s| s.word())).collect()
}
