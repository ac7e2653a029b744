//! Dependency trees: CoNLL-U reading/writing, validation, and module routing.
//!
//! Only the columns the prompt builder consumes are kept (id, form, upos,
//! head, deprel). Forms are lowercased, punctuation is dropped and the
//! remaining tokens are renumbered 1..n, so a parsed tree always serializes
//! back to the same text.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("sentence {sentence_id}, line {line}: malformed row ({reason})")]
    MalformedRow { sentence_id: String, line: usize, reason: String },
    #[error("sentence {sentence_id}, line {line}: cycle in head graph")]
    CycleDetected { sentence_id: String, line: usize },
    #[error("sentence {sentence_id}, line {line}: more than one root")]
    MultipleRoots { sentence_id: String, line: usize },
    #[error("sentence {sentence_id}, line {line}: head points outside the sentence")]
    DanglingHead { sentence_id: String, line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepNode {
    /// 1-based token position.
    pub index: usize,
    pub word: String,
    pub pos: String,
    pub dep: String,
    /// Head token index, 0 for the root.
    pub head: usize,
    /// Child indices in sentence order.
    pub children: Vec<usize>,
}

impl DepNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// One token before validation: (index, word, pos, dep, head).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRow {
    pub index: usize,
    pub word: String,
    pub pos: String,
    pub dep: String,
    pub head: usize,
}

impl TokenRow {
    pub fn new(index: usize, word: &str, pos: &str, dep: &str, head: usize) -> Self {
        TokenRow { index, word: word.to_lowercase(), pos: pos.into(), dep: dep.into(), head }
    }
}

/// A validated dependency tree: single root, acyclic, connected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepTree {
    pub sentence_id: String,
    /// Comment lines other than `# sent_id`, verbatim including `#`.
    pub comments: Vec<String>,
    nodes: Vec<DepNode>,
    root: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    Leaf,
    Rel,
    Enti,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::Leaf, ModuleKind::Rel, ModuleKind::Enti];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Leaf => "Leaf",
            ModuleKind::Rel => "Rel",
            ModuleKind::Enti => "Enti",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dependency labels handled by the relation module (matched before any `:` subtype).
pub const REL_LABELS: [&str; 2] = ["acl", "prep"];

/// Leaf nodes go to `Leaf` regardless of label; internal `acl`/`prep`
/// nodes (including subtypes such as `acl:relcl`) go to `Rel`; everything
/// else to `Enti`.
pub fn route_module(node: &DepNode) -> ModuleKind {
    if node.is_leaf() {
        return ModuleKind::Leaf;
    }
    let base = node.dep.split(':').next().unwrap_or("");
    if REL_LABELS.contains(&base) {
        ModuleKind::Rel
    } else {
        ModuleKind::Enti
    }
}

fn is_punct(dep: &str) -> bool {
    dep.split(':').next() == Some("punct")
}

impl DepTree {
    /// Validates rows (any order) and builds the tree. Punctuation is kept;
    /// see [`DepTree::without_punct`].
    pub fn from_rows(sentence_id: impl Into<String>, comments: Vec<String>, rows: Vec<TokenRow>) -> Result<Self, ParseError> {
        let lines = vec![0; rows.len()];
        Self::build(sentence_id.into(), comments, rows, &lines)
    }

    fn build(sentence_id: String, comments: Vec<String>, rows: Vec<TokenRow>, lines: &[usize]) -> Result<Self, ParseError> {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by_key(|&i| rows[i].index);
        let n = rows.len();
        let line_of = |pos: usize| lines[order[pos]];
        if n == 0 {
            return Err(ParseError::MalformedRow { sentence_id, line: 0, reason: "empty sentence".into() });
        }
        for (pos, &i) in order.iter().enumerate() {
            if rows[i].index != pos + 1 {
                return Err(ParseError::MalformedRow {
                    sentence_id,
                    line: lines[i],
                    reason: format!("token ids must run 1..{n}, found {}", rows[i].index),
                });
            }
        }
        let sorted: Vec<TokenRow> = order.iter().map(|&i| rows[i].clone()).collect();
        let mut root = None;
        for (pos, r) in sorted.iter().enumerate() {
            if r.head > n {
                return Err(ParseError::DanglingHead { sentence_id, line: line_of(pos) });
            }
            if r.head == 0 {
                if root.is_some() {
                    return Err(ParseError::MultipleRoots { sentence_id, line: line_of(pos) });
                }
                root = Some(r.index);
            }
        }
        // Every walk towards the root must terminate within n steps.
        for (pos, r) in sorted.iter().enumerate() {
            let mut cur = r.index;
            let mut steps = 0;
            while cur != 0 {
                cur = sorted[cur - 1].head;
                steps += 1;
                if steps > n {
                    return Err(ParseError::CycleDetected { sentence_id, line: line_of(pos) });
                }
            }
        }
        let root = root.ok_or_else(|| ParseError::CycleDetected { sentence_id: sentence_id.clone(), line: line_of(0) })?;
        let mut nodes: Vec<DepNode> = sorted
            .into_iter()
            .map(|r| DepNode { index: r.index, word: r.word, pos: r.pos, dep: r.dep, head: r.head, children: Vec::new() })
            .collect();
        for i in 0..n {
            let h = nodes[i].head;
            if h != 0 {
                let idx = nodes[i].index;
                nodes[h - 1].children.push(idx);
            }
        }
        Ok(DepTree { sentence_id, comments, nodes, root })
    }

    /// Drops punctuation tokens, re-attaching their children to the nearest
    /// non-punctuation ancestor, and renumbers the rest.
    pub fn without_punct(&self) -> Result<Self, ParseError> {
        if !self.nodes.iter().any(|n| is_punct(&n.dep)) {
            return Ok(self.clone());
        }
        let keep: Vec<bool> = self.nodes.iter().map(|n| !is_punct(&n.dep)).collect();
        if !keep.iter().any(|&k| k) {
            return Err(ParseError::MalformedRow {
                sentence_id: self.sentence_id.clone(),
                line: 0,
                reason: "sentence is all punctuation".into(),
            });
        }
        let mut new_index = vec![0usize; self.nodes.len() + 1];
        let mut next = 0;
        for (i, &k) in keep.iter().enumerate() {
            if k {
                next += 1;
                new_index[i + 1] = next;
            }
        }
        // A punctuation root hands the root role to its first kept descendant.
        let mut new_root_old = None;
        if !keep[self.root - 1] {
            new_root_old = self.preorder().into_iter().find(|&i| keep[i - 1]);
        }
        let mut rows = Vec::with_capacity(next);
        for node in self.nodes.iter().filter(|n| keep[n.index - 1]) {
            let mut h = node.head;
            while h != 0 && !keep[h - 1] {
                h = self.nodes[h - 1].head;
            }
            let head = if Some(node.index) == new_root_old {
                0
            } else if h == 0 && new_root_old.is_some() {
                new_index[new_root_old.unwrap()]
            } else {
                new_index[h]
            };
            rows.push(TokenRow {
                index: new_index[node.index],
                word: node.word.clone(),
                pos: node.pos.clone(),
                dep: node.dep.clone(),
                head,
            });
        }
        DepTree::from_rows(self.sentence_id.clone(), self.comments.clone(), rows)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn nodes(&self) -> &[DepNode] {
        &self.nodes
    }

    /// Node by 1-based index.
    pub fn node(&self, index: usize) -> &DepNode {
        &self.nodes[index - 1]
    }

    pub fn words(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.word.as_str()).collect()
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }

    /// Root first, then each child subtree in sentence order.
    pub fn preorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(i) = stack.pop() {
            out.push(i);
            stack.extend(self.node(i).children.iter().rev());
        }
        out
    }

    /// Children before parents, siblings in sentence order.
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(self.root, false)];
        while let Some((i, expanded)) = stack.pop() {
            if expanded {
                out.push(i);
            } else {
                stack.push((i, true));
                stack.extend(self.node(i).children.iter().rev().map(|&c| (c, false)));
            }
        }
        out
    }

    /// Indices in the subtree rooted at `index`, including itself.
    pub fn subtree(&self, index: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![index];
        while let Some(i) = stack.pop() {
            out.push(i);
            stack.extend(self.node(i).children.iter().copied());
        }
        out.sort_unstable();
        out
    }

    /// Head→dependent pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().filter(|n| n.head != 0).map(|n| (n.head, n.index)).collect()
    }

    pub fn routes(&self) -> Vec<ModuleKind> {
        self.nodes.iter().map(route_module).collect()
    }
}

fn split_blocks(text: &str) -> Vec<Vec<(usize, &str)>> {
    let mut blocks = Vec::new();
    let mut cur = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.is_empty() {
                blocks.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push((i + 1, line));
        }
    }
    if !cur.is_empty() {
        blocks.push(cur);
    }
    blocks
}

/// Parses a CoNLL-U document into validated, punctuation-free trees.
pub fn parse_conllu(text: &str) -> Result<Vec<DepTree>, ParseError> {
    let mut trees = Vec::new();
    for (b, block) in split_blocks(text).into_iter().enumerate() {
        let mut sentence_id = None;
        let mut comments = Vec::new();
        for (_, line) in block.iter().filter(|(_, l)| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            match body.strip_prefix("sent_id") {
                Some(rest) if rest.trim_start().starts_with('=') && sentence_id.is_none() => {
                    sentence_id = Some(rest.trim_start()[1..].trim().to_string());
                }
                _ => comments.push(line.to_string()),
            }
        }
        let sentence_id = sentence_id.unwrap_or_else(|| format!("s{}", b + 1));
        let mut rows = Vec::new();
        let mut lines = Vec::new();
        for &(line_no, line) in block.iter().filter(|(_, l)| !l.starts_with('#')) {
            let cols: Vec<&str> = line.split('\t').collect();
            let malformed = |reason: String| ParseError::MalformedRow { sentence_id: sentence_id.clone(), line: line_no, reason };
            if cols.len() != 10 {
                return Err(malformed(format!("expected 10 tab-separated columns, found {}", cols.len())));
            }
            if cols[0].contains('-') || cols[0].contains('.') {
                continue; // multiword range or empty node
            }
            let index = cols[0].parse::<usize>().map_err(|_| malformed(format!("bad id `{}`", cols[0])))?;
            let head = cols[6].parse::<usize>().map_err(|_| malformed(format!("bad head `{}`", cols[6])))?;
            let pos = if cols[3] != "_" { cols[3] } else { cols[4] };
            rows.push(TokenRow::new(index, cols[1], pos, cols[7], head));
            lines.push(line_no);
        }
        if rows.is_empty() {
            continue;
        }
        let tree = DepTree::build(sentence_id, comments, rows, &lines)?;
        trees.push(tree.without_punct()?);
    }
    Ok(trees)
}

/// One sentence block, terminated by a blank line. Rows are in index order.
pub fn serialize_conllu(tree: &DepTree) -> String {
    let mut out = format!("# sent_id = {}\n", tree.sentence_id);
    for c in &tree.comments {
        out.push_str(c);
        out.push('\n');
    }
    for n in &tree.nodes {
        out.push_str(&format!("{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_\n", n.index, n.word, n.pos, n.head, n.dep));
    }
    out.push('\n');
    out
}

pub fn serialize_document(trees: &[DepTree]) -> String {
    trees.iter().map(serialize_conllu).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, w: &str, dep: &str, head: usize) -> String {
        format!("{i}\t{w}\t_\tX\t_\t_\t{head}\t{dep}\t_\t_")
    }

    #[test]
    fn small_block() {
        let doc = [row(1, "woman", "root", 0), row(2, "a", "det", 1), row(3, "smiling", "acl", 1)].join("\n");
        let trees = parse_conllu(&doc).unwrap();
        assert_eq!(trees.len(), 1);
        let t = &trees[0];
        assert_eq!(t.node(t.root()).word, "woman");
        assert_eq!(t.node(1).children, vec![2, 3]);
        assert_eq!(t.sentence_id, "s1");
    }

    #[test]
    fn self_loop_is_cycle() {
        let doc = [row(1, "a", "root", 0), row(2, "b", "dep", 2)].join("\n");
        assert!(matches!(parse_conllu(&doc), Err(ParseError::CycleDetected { line: 2, .. })));
    }

    #[test]
    fn rootless_is_cycle() {
        let doc = [row(1, "a", "dep", 2), row(2, "b", "dep", 1)].join("\n");
        assert!(matches!(parse_conllu(&doc), Err(ParseError::CycleDetected { .. })));
    }

    #[test]
    fn structural_errors_name_sentence_and_line() {
        let doc = format!("# sent_id = q7\n{}\n{}", row(1, "a", "root", 0), row(2, "b", "root", 0));
        assert_eq!(parse_conllu(&doc), Err(ParseError::MultipleRoots { sentence_id: "q7".into(), line: 3 }));

        let doc = [row(1, "a", "root", 0), row(2, "b", "dep", 9)].join("\n");
        assert_eq!(parse_conllu(&doc), Err(ParseError::DanglingHead { sentence_id: "s1".into(), line: 2 }));

        let doc = format!("{}\n1\tb\t_", row(1, "a", "root", 0));
        assert!(matches!(parse_conllu(&doc), Err(ParseError::MalformedRow { line: 2, .. })));
    }

    #[test]
    fn skips_ranges_and_empty_nodes() {
        let doc = [
            "1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_".to_string(),
            row(1, "do", "root", 0),
            row(2, "n't", "neg", 1),
            "2.1\tx\t_\t_\t_\t_\t_\t_\t_\t_".to_string(),
        ]
        .join("\n");
        assert_eq!(parse_conllu(&doc).unwrap()[0].len(), 2);
    }

    #[test]
    fn punctuation_is_dropped_and_children_reattached() {
        // "red , square" where the comma (oddly) heads "square".
        let doc = [row(1, "Red", "root", 0), row(2, ",", "punct", 1), row(3, "square", "dep", 2), row(4, ".", "punct", 1)].join("\n");
        let t = &parse_conllu(&doc).unwrap()[0];
        assert_eq!(t.words(), vec!["red", "square"]);
        assert_eq!(t.node(2).head, 1);
        assert_eq!(t.node(1).children, vec![2]);
    }

    #[test]
    fn punctuation_root_is_replaced() {
        let doc = [row(1, "hi", "dep", 2), row(2, "!", "punct", 0), row(3, "there", "dep", 2)].join("\n");
        let t = &parse_conllu(&doc).unwrap()[0];
        assert_eq!(t.root(), 1);
        assert_eq!(t.node(2).head, 1);
    }

    #[test]
    fn routing_rules() {
        let mk = |dep: &str, children: Vec<usize>| DepNode { index: 1, word: "w".into(), pos: "X".into(), dep: dep.into(), head: 0, children };
        assert_eq!(route_module(&mk("dobj", vec![])), ModuleKind::Leaf);
        assert_eq!(route_module(&mk("prep", vec![2])), ModuleKind::Rel);
        assert_eq!(route_module(&mk("acl:relcl", vec![2])), ModuleKind::Rel);
        assert_eq!(route_module(&mk("nsubj", vec![2])), ModuleKind::Enti);
        assert_eq!(route_module(&mk("prep", vec![])), ModuleKind::Leaf);
        assert_eq!(route_module(&mk("preposition", vec![2])), ModuleKind::Enti);
    }

    #[test]
    fn single_node_serializes_to_one_row() {
        let t = DepTree::from_rows("x", vec![], vec![TokenRow::new(1, "cat", "NOUN", "root", 0)]).unwrap();
        assert_eq!(serialize_conllu(&t), "# sent_id = x\n1\tcat\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\n");
    }

    #[test]
    fn permuted_rows_serialize_in_index_order() {
        let rows = vec![
            TokenRow::new(3, "c", "X", "dep", 1),
            TokenRow::new(1, "a", "X", "root", 0),
            TokenRow::new(2, "b", "X", "dep", 1),
        ];
        let t = DepTree::from_rows("p", vec![], rows).unwrap();
        let s = serialize_conllu(&t);
        let ids: Vec<&str> = s.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split('\t').next().unwrap()).collect();
        assert_eq!(ids, vec!["1", "2", "3"]);
        assert_eq!(parse_conllu(&s).unwrap()[0], t);
    }

    #[test]
    fn traversal_orders() {
        // 1 <- root; children 2 and 4; 4 has child 3.
        let rows = vec![
            TokenRow::new(1, "r", "X", "root", 0),
            TokenRow::new(2, "b", "X", "dep", 1),
            TokenRow::new(3, "d", "X", "dep", 4),
            TokenRow::new(4, "c", "X", "dep", 1),
        ];
        let t = DepTree::from_rows("t", vec![], rows).unwrap();
        assert_eq!(t.preorder(), vec![1, 2, 4, 3]);
        assert_eq!(t.postorder(), vec![2, 3, 4, 1]);
        assert_eq!(t.subtree(4), vec![3, 4]);
    }
}
