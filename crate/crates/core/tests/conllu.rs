mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treeprompt::conllu::{parse_conllu, serialize_conllu, serialize_document, ModuleKind};

const FIXTURE: &str = include_str!("../../../fixtures/refg_sample.conllu");

/// Token tuples read straight off the text: (sentence, index, word, pos, dep, head).
fn token_lines(text: &str) -> Vec<(usize, usize, String, String, String, usize)> {
    let mut out = Vec::new();
    let mut sentence = 0;
    let mut in_block = false;
    for line in text.lines() {
        if line.trim().is_empty() {
            if in_block {
                sentence += 1;
            }
            in_block = false;
            continue;
        }
        in_block = true;
        if line.starts_with('#') {
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        out.push((sentence, c[0].parse().unwrap(), c[1].to_lowercase(), c[3].to_string(), c[7].to_string(), c[6].parse().unwrap()));
    }
    out
}

#[test]
fn fixture_has_twenty_sentences() {
    let trees = parse_conllu(FIXTURE).unwrap();
    assert_eq!(trees.len(), 20);
    let tokens = token_lines(FIXTURE);
    assert_eq!(trees.iter().map(|t| t.len()).sum::<usize>(), tokens.len());
}

#[test]
fn fixture_round_trips() {
    let trees = parse_conllu(FIXTURE).unwrap();
    let text = serialize_document(&trees);
    assert_eq!(token_lines(&text), token_lines(FIXTURE));
    assert_eq!(parse_conllu(&text).unwrap(), trees);
    assert_eq!(text, FIXTURE);
}

#[test]
fn figure_sentence_routing() {
    let trees = parse_conllu(FIXTURE).unwrap();
    let t = trees.iter().find(|t| t.text() == "a woman with flowers on her sweater holding a remote").unwrap();
    let routes = t.routes();
    let kind = |w: &str| routes[t.nodes().iter().position(|n| n.word == w).unwrap()];
    assert_eq!(kind("remote"), ModuleKind::Leaf);
    assert_eq!(kind("holding"), ModuleKind::Rel);
    assert_eq!(kind("woman"), ModuleKind::Enti);
    assert_eq!(t.len(), 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_trees_round_trip(seed in any::<u64>(), n in 1usize..14) {
        let tree = common::random_tree(&mut ChaCha8Rng::seed_from_u64(seed), n);
        let text = serialize_conllu(&tree);
        let back = parse_conllu(&text).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(serialize_conllu(&back[0]), text.clone());
        let oracle: Vec<_> = tree.nodes().iter().map(|n| (0, n.index, n.word.clone(), n.pos.clone(), n.dep.clone(), n.head)).collect();
        prop_assert_eq!(token_lines(&text), oracle);
    }
}
