use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Scalar, Tape, Tensor, Var};

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether AdamW applies weight decay to this parameter.
    pub decay: bool,
}

/// Ordered collection of named parameters. Order is stable and defines the
/// layout of optimizer state and checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), index: HashMap::new() }
    }

    /// Appends a parameter and returns its position.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value: value.with_grad(), decay });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// The first `n` parameters as a new set.
    pub fn prefix(&self, n: usize) -> Self {
        let mut out = ParamSet::new();
        for p in &self.params[..n] {
            out.push(p.name.clone(), p.value.clone(), p.decay);
        }
        out
    }

    /// Registers every parameter as a leaf on `tape`. The returned vars are
    /// parallel to the set's order.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(&p.value)).collect()
    }

    /// Overwrites every value with the same-named tensor from `entries`.
    pub fn assign_from(&mut self, entries: &HashMap<String, Tensor<T>>, prefix: &str) -> Result<()> {
        // Validate everything first so a failed load leaves the set untouched.
        for p in &self.params {
            let key = format!("{prefix}{}", p.name);
            let t = entries.get(&key).ok_or_else(|| Error::Format(format!("missing tensor `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
        }
        for p in &mut self.params {
            let t = &entries[&format!("{prefix}{}", p.name)];
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
