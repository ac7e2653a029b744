//! Pretrained word vectors stored in the checkpoint container.
//!
//! The file holds one tensor, `word_vectors` of shape `[rows, d_w]`; the
//! manifest's `meta.words` names the word of every row. A `<unk>` row, if
//! present, fills vocabulary words the file does not cover.

use std::path::Path;

use super::{TreePrompt, TreePromptError, Vocab, UNK};
use crate::numerics::{checkpoint, ParamStore, Tensor};
use crate::Scalar;

pub const WORD_VECTORS: &str = "word_vectors";

#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors<T> {
    pub words: Vec<String>,
    pub vectors: Tensor<T>,
}

impl<T: Scalar> WordVectors<T> {
    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn save(&self, path: &Path) -> Result<(), TreePromptError> {
        let mut store = ParamStore::new();
        store.insert(WORD_VECTORS, self.vectors.clone())?;
        checkpoint::save(&store, path, serde_json::json!({ "words": self.words }))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TreePromptError> {
        let (store, manifest) = checkpoint::load::<T>(path)?;
        let vectors = store.by_name(WORD_VECTORS).ok_or_else(|| TreePromptError::MissingParam(WORD_VECTORS.into()))?.clone();
        let words: Vec<String> = manifest
            .and_then(|m| m.meta.get("words").cloned())
            .and_then(|w| serde_json::from_value(w).ok())
            .ok_or_else(|| TreePromptError::Config("word vector manifest lacks `meta.words`".into()))?;
        if vectors.rank() != 2 || vectors.shape()[0] != words.len() {
            return Err(TreePromptError::Config(format!(
                "word vector tensor {:?} does not match {} listed words",
                vectors.shape(),
                words.len()
            )));
        }
        Ok(WordVectors { words, vectors })
    }

    /// Overwrites the word table rows of `tp` in `store`. Returns how many
    /// vocabulary words were found in the file.
    pub fn apply(&self, tp: &TreePrompt, store: &mut ParamStore<T>, vocab: &Vocab) -> Result<usize, TreePromptError> {
        let d_w = tp.config.d_w;
        if self.dim() != d_w {
            return Err(TreePromptError::DimMismatch { expected: d_w, found: self.dim() });
        }
        let id = store.id("tree.emb.word").ok_or_else(|| TreePromptError::Config("continuous prompts have no word table".into()))?;
        let row_of = |w: &str| self.words.iter().position(|x| x == w);
        let unk = row_of(UNK);
        let src = self.vectors.data();
        let table = store.get_mut(id).data_mut();
        let mut found = 0;
        for v in 0..vocab.words.len() {
            let hit = row_of(vocab.words.token(v));
            found += usize::from(hit.is_some() && v != crate::tree_prompt::UNK_ID);
            if let Some(r) = hit.or(unk) {
                table[v * d_w..(v + 1) * d_w].copy_from_slice(&src[r * d_w..(r + 1) * d_w]);
            }
        }
        Ok(found)
    }
}
