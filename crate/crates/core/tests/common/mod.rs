#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use treeprompt::conllu::{route_module, DepTree, TokenRow};
use treeprompt::tree_prompt::{compose_node_prompt, embed_node, node_representation, EmbeddingTables, ModuleParams, Vocab};

pub const WORDS: [&str; 10] = ["ball", "red", "man", "holding", "left", "of", "the", "cube", "small", "that"];
pub const POS: [&str; 5] = ["NOUN", "ADJ", "VERB", "ADP", "DET"];
pub const DEPS: [&str; 9] = ["root", "det", "amod", "nsubj", "prep", "pobj", "acl", "dobj", "acl:relcl"];

/// Vocabulary containing every token above.
pub fn pool_vocab() -> Vocab {
    let rows: Vec<TokenRow> = (0..WORDS.len())
        .map(|i| TokenRow::new(i + 1, WORDS[i], POS[i % POS.len()], DEPS[i % DEPS.len()], if i == 0 { 0 } else { 1 }))
        .collect();
    let tree = DepTree::from_rows("pool", vec![], rows).unwrap();
    Vocab::build([&tree], 1)
}

/// Uniform random attachment tree with `n` nodes and shuffled token order.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize) -> DepTree {
    let mut parent = vec![0usize; n];
    for (i, p) in parent.iter_mut().enumerate().skip(1) {
        *p = rng.gen_range(0..i) + 1;
    }
    let mut perm: Vec<usize> = (1..=n).collect();
    perm.shuffle(rng);
    let rows = (0..n)
        .map(|i| {
            let head = if i == 0 { 0 } else { perm[parent[i] - 1] };
            let dep = if i == 0 { "root" } else { DEPS[rng.gen_range(1..DEPS.len())] };
            TokenRow::new(perm[i], WORDS[rng.gen_range(0..WORDS.len())], POS[rng.gen_range(0..POS.len())], dep, head)
        })
        .collect();
    DepTree::from_rows("rand", vec![], rows).unwrap()
}

/// Rebuilds `tree` with token `index` renamed.
pub fn with_word(tree: &DepTree, index: usize, word: &str) -> DepTree {
    let rows = tree
        .nodes()
        .iter()
        .map(|n| TokenRow::new(n.index, if n.index == index { word } else { &n.word }, &n.pos, &n.dep, n.head))
        .collect();
    DepTree::from_rows(tree.sentence_id.clone(), tree.comments.clone(), rows).unwrap()
}

/// Recursive composition built only from the plain-vector functions.
pub fn reference_compose(
    tree: &DepTree,
    vocab: &Vocab,
    tables: &EmbeddingTables<f64>,
    params: &ModuleParams<f64>,
    index: usize,
) -> Vec<f64> {
    let node = tree.node(index);
    let kind = route_module(node);
    let n = embed_node(node, vocab, tables);
    let r = node_representation(&n, kind, params).unwrap();
    let children: Vec<Vec<f64>> =
        node.children.iter().map(|&c| reference_compose(tree, vocab, tables, params, c)).collect();
    compose_node_prompt(&r, &children, kind, params).unwrap()
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treeprompt::grounder::{Backbone, BackboneConfig, Dataset, DatasetConfig, FrozenBackbone, SplitSizes};
use treeprompt::numerics::ParamStore;
use treeprompt::Scalar;

pub fn small_dataset(seed: u64, sizes: [usize; 5]) -> Dataset {
    let [pretrain, tune_train, tune_val, tune_test_simple, tune_test_compositional] = sizes;
    let config = DatasetConfig {
        sizes: SplitSizes { pretrain, tune_train, tune_val, tune_test_simple, tune_test_compositional },
        ..Default::default()
    };
    Dataset::generate(seed, &config).unwrap()
}

/// Untrained backbone of width 16 over the dataset's vocabulary.
pub fn random_backbone<T: Scalar>(ds: &Dataset, seed: u64) -> FrozenBackbone<T> {
    let vocab = ds.vocab();
    let config = BackboneConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        ffn: 32,
        ..BackboneConfig::new(ds.config.world.feature_dim(), vocab.words.len())
    };
    let mut store = ParamStore::new();
    let backbone = Backbone::register(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    FrozenBackbone { store, backbone, vocab }
}
