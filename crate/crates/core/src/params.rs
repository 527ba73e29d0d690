use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Registers every tensor as a trainable leaf, in store order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    /// Replaces all values from `other`, which must carry the same names and
    /// shapes in the same order.
    pub fn load_from(&mut self, other: ParamStore<F>) -> Result<()> {
        if other.names != self.names {
            let missing = self.names.iter().find(|n| !other.names.contains(n));
            return Err(Error::config(match missing {
                Some(n) => format!("parameter {n} missing from checkpoint"),
                None => "checkpoint parameter list does not match the model".to_string(),
            }));
        }
        for ((name, mine), theirs) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::config(format!(
                    "parameter {name}: model expects {:?}, checkpoint has {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        self.tensors = other.tensors;
        Ok(())
    }
}
