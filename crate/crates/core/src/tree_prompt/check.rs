//! Finite-difference check of the complete prompt builder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{FusionConfig, TreePrompt, TreePromptConfig, TreePromptError, Vocab};
use crate::conllu::{DepTree, TokenRow};
use crate::numerics::gradcheck::{check_gradients, GradCheckReport};
use crate::numerics::{ParamStore, Tensor};

const WORDS: [&str; 6] = ["red", "square", "left", "of", "the", "circle"];
const POS: [&str; 4] = ["ADJ", "NOUN", "ADP", "DET"];
const DEPS: [&str; 6] = ["amod", "det", "prep", "pobj", "acl", "nsubj"];

/// Random tree with `n` nodes: each token attaches to an earlier one.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DepTree {
    let rows = (1..=n)
        .map(|i| {
            let head = if i == 1 { 0 } else { rng.gen_range(1..i) };
            let dep = if i == 1 { "root" } else { DEPS[rng.gen_range(0..DEPS.len())] };
            TokenRow::new(i, WORDS[rng.gen_range(0..WORDS.len())], POS[rng.gen_range(0..POS.len())], dep, head)
        })
        .collect();
    DepTree::from_rows("check", vec![], rows).expect("valid random tree")
}

/// Checks every prompt parameter (tables, modules, positions, fusion
/// projections, global prompt) on a 5-node tree with `d_p = 8`, `N = 8`.
/// The loss is `sum(P ⊙ R)` for a fixed random `R`.
pub fn prompt_grad_check(seed: u64) -> Result<GradCheckReport, TreePromptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = random_tree(&mut rng, 5);
    let vocab = Vocab::build([&tree], 1);
    let config = TreePromptConfig {
        d_w: 6,
        d_l: 3,
        d_p: 8,
        prompt_len: 8,
        max_tree_len: 8,
        fusion: FusionConfig { heads: 2, projections: true, ..Default::default() },
        init_std: 0.5,
        ..Default::default()
    };
    let mut store = ParamStore::<f64>::new();
    let tp = TreePrompt::register(&mut store, config, &vocab, &mut rng)?;
    // Non-zero biases so every term of the forward pass is exercised.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") || store.name(id).ends_with(".b1") || store.name(id).ends_with(".b2") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
        }
    }
    let r = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
    let trainable = vec![true; store.len()];
    check_gradients::<TreePromptError, _>(&store, &trainable, 1e-5, |g| {
        let (p, _) = tp.prompt(g, &tree, &vocab)?;
        let rv = g.constant(r.clone());
        let prod = g.mul(p, rv)?;
        Ok(g.sum(prod))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_gradients_match_finite_differences() {
        for seed in 0..3 {
            let report = prompt_grad_check(seed).unwrap();
            assert!(report.max_rel_error <= 1e-4, "seed {seed}: {report:?}");
            assert!(report.entries_checked > 500);
        }
    }
}
