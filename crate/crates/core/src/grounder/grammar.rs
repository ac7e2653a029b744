//! Template grammar: surface tokens together with their gold dependency tree.

use super::world::{Description, Relation};
use crate::conllu::{DepTree, TokenRow};

#[derive(Default)]
struct Builder {
    rows: Vec<TokenRow>,
}

impl Builder {
    /// Appends a token with a provisional head and returns its 1-based index.
    fn push(&mut self, word: &str, pos: &str, dep: &str, head: usize) -> usize {
        let i = self.rows.len() + 1;
        self.rows.push(TokenRow::new(i, word, pos, dep, head));
        i
    }

    fn set_head(&mut self, index: usize, head: usize) {
        self.rows[index - 1].head = head;
    }

    /// `the [size] [color] shape`; returns the noun's index. The noun's own
    /// label and head are set by the caller.
    fn noun_phrase(&mut self, d: &Description, dep: &str, head: usize) -> usize {
        let det = self.push("the", "DET", "det", 0);
        let words = d.words();
        let adjs: Vec<usize> = words[..words.len() - 1].iter().map(|w| self.push(w, "ADJ", "amod", 0)).collect();
        let noun = self.push(words[words.len() - 1], "NOUN", dep, head);
        self.set_head(det, noun);
        for a in adjs {
            self.set_head(a, noun);
        }
        noun
    }

    /// `<rel> NP` attached to `head` as a modifier; returns the object noun.
    fn relation(&mut self, rel: Relation, head: usize, object: &Description) -> usize {
        match rel {
            Relation::LeftOf | Relation::RightOf => {
                let side = self.push(rel.words()[0], "ADV", "prep", head);
                let of = self.push("of", "ADP", "prep", side);
                self.noun_phrase(object, "pobj", of)
            }
            Relation::Above | Relation::Below => {
                let p = self.push(rel.words()[0], "ADP", "prep", head);
                self.noun_phrase(object, "pobj", p)
            }
            Relation::Holding => {
                let v = self.push("holding", "VERB", "acl", head);
                self.noun_phrase(object, "dobj", v)
            }
        }
    }

    /// `that is <rel> NP` as a relative clause on `head`.
    fn relative_clause(&mut self, rel: Relation, head: usize, object: &Description) {
        let that = self.push("that", "PRON", "nsubj", 0);
        let is = self.push("is", "AUX", "acl:relcl", head);
        if rel == Relation::Holding {
            let v = self.push("holding", "VERB", "acl:relcl", head);
            self.noun_phrase(object, "dobj", v);
            self.set_head(that, v);
            let row = &mut self.rows[is - 1];
            row.dep = "aux".into();
            row.head = v;
        } else {
            self.set_head(that, is);
            self.relation(rel, is, object);
        }
    }

    fn finish(self, id: &str) -> DepTree {
        DepTree::from_rows(id, vec![], self.rows).expect("template trees are well formed")
    }
}

/// `the [size] [color] shape`.
pub fn simple_query(id: &str, x: &Description) -> DepTree {
    let mut b = Builder::default();
    b.noun_phrase(x, "root", 0);
    b.finish(id)
}

/// `the X <rel1> the Y that is <rel2> the Z`.
pub fn compositional_query(id: &str, x: &Description, rel1: Relation, y: &Description, rel2: Relation, z: &Description) -> DepTree {
    let mut b = Builder::default();
    let root = b.noun_phrase(x, "root", 0);
    let y_head = b.relation(rel1, root, y);
    b.relative_clause(rel2, y_head, z);
    b.finish(id)
}
