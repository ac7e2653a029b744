use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{pretune_global, tune, RunConfig, RunReport, TrainError};
use crate::grounder::{Dataset, FrozenBackbone, Split};
use crate::injection::PromptMode;
use crate::numerics::Tensor;
use crate::Scalar;

/// (variant, tree composition, modules).
pub const ABLATION_ROWS: [(&str, bool, bool); 4] =
    [("full", true, true), ("w/o tree", false, true), ("w/o module", true, false), ("continuous", false, false)];

pub const SWEEP_LENGTHS: [usize; 5] = [10, 32, 64, 100, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub lengths: Vec<usize>,
    /// Seed for the single-run length sweep.
    pub sweep_seed: u64,
    /// Epochs per length-sweep run; `None` uses the run config.
    pub sweep_epochs: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { seeds: vec![0, 1, 2], lengths: SWEEP_LENGTHS.to_vec(), sweep_seed: 0, sweep_epochs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub tree_enabled: bool,
    pub modules_enabled: bool,
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRow {
    pub prompt_len: usize,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub split: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    pub lengths: Vec<LengthRow>,
    pub runs: Vec<RunReport>,
}

impl AblationReport {
    pub fn cell(&self, variant: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("Top-1 accuracy (%) on `{}`, mean over seeds {:?}\n\n", self.split, self.seeds);
        out.push_str("| variant | tree | module | accuracy |\n|---|---|---|---|\n");
        let mark = |b: bool| if b { "yes" } else { "no" };
        for c in &self.cells {
            out.push_str(&format!("| {} | {} | {} | {:.1} |\n", c.variant, mark(c.tree_enabled), mark(c.modules_enabled), 100.0 * c.mean));
        }
        if !self.lengths.is_empty() {
            out.push_str("\n| prompt length | accuracy |\n|---|---|\n");
            for r in &self.lengths {
                out.push_str(&format!("| {} | {:.1} |\n", r.prompt_len, 100.0 * r.accuracy));
            }
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from("variant,tree,module,mean,per_seed\n");
        for c in &self.cells {
            let seeds: Vec<String> = c.per_seed.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{},{},{},{},{}\n", c.variant, c.tree_enabled, c.modules_enabled, c.mean, seeds.join(";")));
        }
        out
    }

    pub fn lengths_csv(&self) -> String {
        let mut out = String::from("prompt_len,accuracy,seconds\n");
        for r in &self.lengths {
            out.push_str(&format!("{},{},{}\n", r.prompt_len, r.accuracy, r.seconds));
        }
        out
    }
}

fn run<T: Scalar>(
    frozen: &FrozenBackbone<T>,
    dataset: &Dataset,
    config: &RunConfig,
    globals: &mut BTreeMap<usize, Tensor<T>>,
) -> Result<RunReport, TrainError> {
    let global = if config.prompt_mode == PromptMode::Multi {
        if !globals.contains_key(&config.prompt_len) {
            let (t, _) = pretune_global(frozen, dataset, config)?;
            globals.insert(config.prompt_len, t);
        }
        globals.get(&config.prompt_len)
    } else {
        None
    };
    Ok(tune(frozen, dataset, config, global)?.0)
}

/// The four tree × module cells over every seed, then the prompt-length sweep
/// for the full model. Accuracy is read on the compositional test split.
pub fn ablate<T: Scalar>(
    frozen: &FrozenBackbone<T>,
    dataset: &Dataset,
    base: &RunConfig,
    acfg: &AblationConfig,
) -> Result<AblationReport, TrainError> {
    if acfg.seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one seed".into()));
    }
    let split = Split::TuneTestCompositional.to_string();
    let mut globals = BTreeMap::new();
    let mut runs = Vec::new();
    let mut cells = Vec::new();
    for (variant, tree, modules) in ABLATION_ROWS {
        let mut per_seed = Vec::new();
        for &seed in &acfg.seeds {
            let cfg = RunConfig { tree_enabled: tree, modules_enabled: modules, seed, ..base.clone() };
            let report = run(frozen, dataset, &cfg, &mut globals)?;
            per_seed.push(report.test_accuracy.get(&split).copied().unwrap_or(f64::NAN));
            runs.push(report);
        }
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        cells.push(AblationCell { variant: variant.into(), tree_enabled: tree, modules_enabled: modules, per_seed, mean });
    }
    let mut lengths = Vec::new();
    for &n in &acfg.lengths {
        let cfg = RunConfig {
            tree_enabled: true,
            modules_enabled: true,
            prompt_len: n,
            seed: acfg.sweep_seed,
            epochs_tree: acfg.sweep_epochs.unwrap_or(base.epochs_tree),
            ..base.clone()
        };
        let report = run(frozen, dataset, &cfg, &mut globals)?;
        lengths.push(LengthRow {
            prompt_len: n,
            accuracy: report.test_accuracy.get(&split).copied().unwrap_or(f64::NAN),
            seconds: report.seconds,
        });
    }
    Ok(AblationReport { split, seeds: acfg.seeds.clone(), cells, lengths, runs })
}
