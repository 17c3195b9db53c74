//! Named parameter storage and per-pass graphs that bind parameters lazily.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use super::{Float, Tape, Tensor, Var};
use crate::error::{contract_err, shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors. Insertion order is the
/// canonical order used by checkpoints and optimizers.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Replaces every tensor by the same-named one from `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor<T>)]) -> Result<()> {
        if other.len() != self.len() {
            return Err(contract_err!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            ));
        }
        for (name, t) in other {
            let id = self
                .id(name)
                .ok_or_else(|| contract_err!("unknown parameter {name}"))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(shape_err!(
                    "parameter {name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                ));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}

/// A tape plus the parameters bound onto it. Parameters are copied onto the
/// tape the first time they are used, as gradient leaves when training and
/// as constants otherwise.
pub struct Graph<'s, T> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'s, T: Float> Graph<'s, T> {
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, true)
    }

    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.train {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient per parameter after `backward`; `None` for parameters the
    /// pass never touched.
    pub fn param_grads(&mut self) -> Vec<Option<Tensor<T>>> {
        let bound = self.bound.clone();
        bound
            .into_iter()
            .map(|b| b.and_then(|v| self.tape.take_grad(v)))
            .collect()
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}
