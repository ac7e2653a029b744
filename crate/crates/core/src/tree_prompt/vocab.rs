use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conllu::{DepNode, DepTree};

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Dense token table with `<unk>` at id 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Table {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl From<Vec<String>> for Table {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Table { tokens, ids }
    }
}

impl From<Table> for Vec<String> {
    fn from(t: Table) -> Self {
        t.tokens
    }
}

impl Table {
    /// Keeps tokens seen at least `min_count` times, ordered by descending
    /// count then lexicographically, after `<unk>`.
    pub fn from_counts(counts: &BTreeMap<String, usize>, min_count: usize) -> Self {
        let mut kept: Vec<(&String, &usize)> = counts.iter().filter(|(t, &c)| c >= min_count && t.as_str() != UNK).collect();
        kept.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.clone()));
        tokens.into()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }
}

/// Word, POS and dependency-label vocabularies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Table,
    pub pos: Table,
    pub deps: Table,
}

/// Token ids for one node: (word, pos, dep).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeIds {
    pub word: usize,
    pub pos: usize,
    pub dep: usize,
}

impl Vocab {
    /// Entries occurring fewer than `min_count` times map to `<unk>`.
    pub fn build<'a>(trees: impl IntoIterator<Item = &'a DepTree>, min_count: usize) -> Self {
        let mut words = BTreeMap::new();
        let mut pos = BTreeMap::new();
        let mut deps = BTreeMap::new();
        for tree in trees {
            for n in tree.nodes() {
                *words.entry(n.word.clone()).or_insert(0) += 1;
                *pos.entry(n.pos.clone()).or_insert(0) += 1;
                *deps.entry(n.dep.clone()).or_insert(0) += 1;
            }
        }
        Vocab {
            words: Table::from_counts(&words, min_count),
            pos: Table::from_counts(&pos, min_count),
            deps: Table::from_counts(&deps, min_count),
        }
    }

    pub fn node_ids(&self, node: &DepNode) -> NodeIds {
        NodeIds { word: self.words.id(&node.word), pos: self.pos.id(&node.pos), dep: self.deps.id(&node.dep) }
    }

    pub fn word_ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.words.id(w.as_ref())).collect()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conllu::parse_conllu;

    #[test]
    fn threshold_and_stable_ids() {
        let doc = "1\tred\t_\tADJ\t_\t_\t2\tamod\t_\t_\n2\tsquare\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\n\
                   1\tred\t_\tADJ\t_\t_\t2\tamod\t_\t_\n2\tcircle\t_\tNOUN\t_\t_\t0\troot\t_\t_\n";
        let trees = parse_conllu(doc).unwrap();
        let v = Vocab::build(&trees, 2);
        assert_eq!(v.words.id("red"), 1);
        assert_eq!(v.words.id("square"), UNK_ID);
        assert_eq!(v.words.len(), 2);
        assert_eq!(v.pos.len(), 3);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.deps.id("amod"), v.deps.id("amod"));
    }
}
