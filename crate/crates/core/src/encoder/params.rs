use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Checks that every expected name is present with the expected shape.
    pub fn check_layout(&self, expected: &ParamStore) -> Result<()> {
        if self.names != expected.names {
            return Err(Error::Config(format!(
                "parameter names do not match the configured architecture ({} vs {} tensors)",
                self.len(),
                expected.len()
            )));
        }
        for ((name, a), b) in self.iter().zip(expected.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records every tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { store: self, vars }
    }
}

/// Graph handles for a [`ParamStore`].
pub struct BoundParams<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl BoundParams<'_> {
    pub fn var(&self, name: &str) -> Var {
        let idx = *self
            .store
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name));
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters unreachable from the loss get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.store.tensors())
            .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
