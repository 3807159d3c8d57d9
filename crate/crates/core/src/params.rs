//! Named parameter storage shared by the network and the optimizer.

use crate::error::{shape_err, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a gradient-tracking leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Copies gradients from a backpropagated tape into the parameters.
    /// Parameters the loss does not reach receive an all-zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites values from `other`, which must have identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(shape_err!("parameter sets differ"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(shape_err!("parameter shape {:?} vs {:?}", dst.shape(), src.shape()));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a [`ParamStore`], valid for one tape.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    /// Handles in store order, e.g. leaves created by hand for gradient checks.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}
