use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use super::{NumericsError, Tensor};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids().map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id).collect()
    }

    /// SHA-256 over names, shapes and raw values; stable across runs.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.len() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Copies every tensor present in `other` under the same name.
    pub fn merge_from(&mut self, other: &ParamStore<T>) -> Result<(), NumericsError> {
        for (_, name, t) in other.iter() {
            match self.id(name) {
                Some(id) => {
                    if self.values[id.0].shape() != t.shape() {
                        return Err(NumericsError::ShapeMismatch {
                            op: "merge",
                            detail: format!("{name}: {:?} vs {:?}", self.values[id.0].shape(), t.shape()),
                        });
                    }
                    self.values[id.0] = t.clone();
                }
                None => {
                    self.insert(name.to_string(), t.clone())?;
                }
            }
        }
        Ok(())
    }

    /// A new store holding only the selected parameters.
    pub fn subset(&self, ids: &[ParamId]) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for &id in ids {
            out.insert(self.names[id.0].clone(), self.values[id.0].clone()).expect("unique names");
        }
        out
    }
}

/// Tape plus lazily bound parameters. Parameters marked trainable become
/// gradient-requiring leaves; the rest are constants.
pub struct Graph<'p, T: Scalar> {
    tape: Tape<T>,
    store: &'p ParamStore<T>,
    trainable: Option<&'p [bool]>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(store: &'p ParamStore<T>, trainable: &'p [bool]) -> Self {
        assert_eq!(trainable.len(), store.len(), "trainable mask must cover every parameter");
        Graph { tape: Tape::new(), store, trainable: Some(trainable), bound: vec![None; store.len()] }
    }

    /// Graph with every parameter frozen.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Graph { tape: Tape::new(), store, trainable: None, bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.is_some_and(|m| m[id.0])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.is_trainable(id);
        let v = self.tape.leaf(self.store.get(id).clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// Backpropagates `loss` and gathers gradients per parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>, NumericsError> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = vec![None; self.store.len()];
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if self.tape.requires_grad(*v) {
                    out[i] = grads.take(*v);
                }
            }
        }
        Ok(ParamGrads { grads: out })
    }
}

impl<T: Scalar> Deref for Graph<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Scalar> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

/// Per-parameter gradients; `None` means no gradient reached the parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(n: usize) -> Self {
        ParamGrads { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum, in a fixed order.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *mine = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().flatten().map(|g| g.data().iter().map(|&v| v * v).sum::<T>()).sum::<T>().sqrt()
    }

    /// Dense gradients for the trainable mask. Trainable parameters that
    /// received nothing are reported as disconnected and get zeros.
    pub fn densify(&self, store: &ParamStore<T>, trainable: &[bool]) -> Vec<Option<Tensor<T>>> {
        store
            .ids()
            .map(|id| {
                if !trainable[id.0] {
                    return None;
                }
                Some(match &self.grads[id.0] {
                    Some(g) => g.clone(),
                    None => {
                        log::warn!("{}", NumericsError::DisconnectedParameter(store.name(id).to_string()));
                        Tensor::zeros(store.get(id).shape())
                    }
                })
            })
            .collect()
    }

    /// Names of parameters that received a nonzero gradient.
    pub fn nonzero_names<'s>(&self, store: &'s ParamStore<T>) -> Vec<&'s str> {
        store
            .ids()
            .filter(|id| self.grads[id.0].as_ref().is_some_and(|g| g.data().iter().any(|v| *v != T::zero())))
            .map(|id| store.name(id))
            .collect()
    }
}
