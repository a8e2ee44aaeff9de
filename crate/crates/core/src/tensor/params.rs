use std::collections::HashMap;

use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.values.push(value);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name).ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone())).collect();
        BoundParams {
            index: self.index.clone(),
            vars,
        }
    }

    /// Fails with the full list of names absent from `self`.
    pub fn check_contains(&self, expected: &[String]) -> Result<()> {
        let missing: Vec<String> = expected
            .iter()
            .filter(|n| !self.index.contains_key(*n))
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingTensors(missing))
        }
    }
}

/// Tape handles for a [`ParamStore`], in the same order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Panics if `name` was never bound; parameter layouts are fixed at
    /// model construction.
    pub fn var(&self, name: &str) -> Var {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; unreached leaves get zeros.
    pub fn gradients(&self, tape: &Tape) -> Vec<Matrix> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v).cloned().unwrap_or_else(|| {
                    let (r, c) = tape.shape(v);
                    Matrix::zeros(r, c)
                })
            })
            .collect()
    }
}
