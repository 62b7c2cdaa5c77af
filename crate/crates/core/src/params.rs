//! Named parameter storage with per-path freezing.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by hierarchical dotted path, e.g. `diia.block0.gate.audio`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    tensors: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, mut tensor: Tensor) -> Result<()> {
        let path = path.into();
        if self.tensors.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        tensor.requires_grad = true;
        self.tensors.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors.get(path).ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn freeze(&mut self, path: &str) -> Result<()> {
        if !self.tensors.contains_key(path) {
            return Err(Error::UnknownParam(path.to_string()));
        }
        self.frozen.insert(path.to_string());
        if let Some(t) = self.tensors.get_mut(path) {
            t.requires_grad = false;
            t.grad = None;
        }
        Ok(())
    }

    /// Freezes every path starting with `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let hits: Vec<String> = self.tensors.keys().filter(|p| p.starts_with(prefix)).cloned().collect();
        for p in &hits {
            self.freeze(p).expect("path taken from the map");
        }
        hits.len()
    }

    /// Freezes everything except paths starting with one of `trainable`.
    pub fn freeze_all_except(&mut self, trainable: &[&str]) {
        let hits: Vec<String> = self
            .tensors
            .keys()
            .filter(|p| !trainable.iter().any(|t| p.starts_with(t)))
            .cloned()
            .collect();
        for p in &hits {
            self.freeze(p).expect("path taken from the map");
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
        for t in self.tensors.values_mut() {
            t.requires_grad = true;
        }
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.contains(path)
    }

    pub fn frozen(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Adds `scale * grad` into each named parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Vec<f64>>, scale: f64) -> Result<()> {
        for (path, g) in grads {
            if self.frozen.contains(path) {
                continue;
            }
            let t = self.get_mut(path)?;
            if g.len() != t.numel() {
                return Err(Error::Shape {
                    op: "accumulate_grad",
                    lhs: t.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += scale * v),
                slot @ None => *slot = Some(g.iter().map(|v| scale * v).collect()),
            }
        }
        Ok(())
    }

    /// Gives every non-frozen parameter a gradient buffer (zeros if absent).
    pub fn ensure_grads(&mut self) {
        for (path, t) in self.tensors.iter_mut() {
            if !self.frozen.contains(path) && t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// True when both trees hold the same paths with bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParamTree) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((pa, ta), (pb, tb))| {
                pa == pb
                    && ta.shape() == tb.shape()
                    && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
