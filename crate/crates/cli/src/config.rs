use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use treeprompt::grounder::{BackboneConfig, DatasetConfig, PretrainConfig};
use treeprompt::train_eval::{AblationConfig, RunConfig};

/// Backbone shape; the feature width and vocabulary size come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneDims {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_text_len: usize,
}

impl Default for BackboneDims {
    fn default() -> Self {
        let b = BackboneConfig::new(0, 0);
        BackboneDims { d_model: b.d_model, layers: b.layers, heads: b.heads, ffn: b.ffn, max_text_len: b.max_text_len }
    }
}

impl BackboneDims {
    pub fn config(&self, feature_dim: usize, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_text_len: self.max_text_len,
            feature_dim,
            vocab_size,
        }
    }
}

/// Everything a subcommand can be configured with. Loaded from TOML, then
/// overridden by flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub data: DatasetConfig,
    pub backbone: BackboneDims,
    pub pretrain: PretrainConfig,
    pub run: RunConfig,
    pub ablation: AblationConfig,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.seed.context("missing required field `seed` (pass --seed or set `seed` in the config file)")
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config { seed: Some(3), ..Default::default() };
        let back: Config = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_fields_name_their_path() {
        let err = toml::from_str::<Config>("[run]\nlr_treee = 1.0\n").unwrap_err().to_string();
        assert!(err.contains("lr_treee"), "{err}");
    }
}
