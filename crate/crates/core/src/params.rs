//! Named parameter collections.
//!
//! Optimizers, checkpoints, and the gradient checker all need to walk "every
//! trainable tensor of a model" in a stable order. A [`ParamSet`] is an
//! ordered name -> tensor map; insertion order is the canonical order and is
//! fixed by each model's constructor.

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    Duplicate(String),
    #[error("unknown parameter name {0:?}")]
    Unknown(String),
    #[error("parameter {name:?} has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        if self.names.iter().any(|n| n == name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn at(&self, index: usize) -> (&str, &Tensor) {
        (&self.names[index], &self.tensors[index])
    }

    pub fn at_mut(&mut self, index: usize) -> (&str, &mut Tensor) {
        (&self.names[index], &mut self.tensors[index])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Replace the stored value of `name`, enforcing the existing shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), ParamError> {
        let i = self
            .index_of(name)
            .ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        if self.tensors[i].shape() != tensor.shape() {
            return Err(ParamError::ShapeMismatch {
                name: name.to_string(),
                expected: self.tensors[i].shape().to_vec(),
                actual: tensor.shape().to_vec(),
            });
        }
        self.tensors[i] = tensor;
        Ok(())
    }

    /// Zero-filled clone with identical names and shapes; gradient storage.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    /// Record every tensor as a tape leaf, in set order.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        let ids = self.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        Bound { set: self, ids }
    }

    /// Pair this set with externally created leaves (one per tensor, in set
    /// order). Used by the gradient checker, which owns leaf creation.
    pub fn bound_to<'a>(&'a self, ids: &[NodeId]) -> Bound<'a> {
        assert_eq!(ids.len(), self.len(), "leaf count mismatch");
        Bound {
            set: self,
            ids: ids.to_vec(),
        }
    }

    /// First non-finite value across all tensors, as (name, flat index, value).
    pub fn find_non_finite(&self) -> Option<(&str, usize, f64)> {
        for (name, t) in self.iter() {
            for (i, &v) in t.values().iter().enumerate() {
                if !v.is_finite() {
                    return Some((name, i, v));
                }
            }
        }
        None
    }
}

/// A parameter set whose tensors live on a tape. Lookup by name; panics on
/// unknown names since forward code only asks for names it registered.
pub struct Bound<'a> {
    set: &'a ParamSet,
    ids: Vec<NodeId>,
}

impl Bound<'_> {
    pub fn id(&self, name: &str) -> NodeId {
        match self.set.index_of(name) {
            Some(i) => self.ids[i],
            None => panic!("unbound parameter {name:?}"),
        }
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradient tensors for the whole set, zeros where a parameter did not
    /// influence the objective, in set order.
    pub fn gradients(&self, grads: &crate::tape::Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (i, (name, t)) in self.set.iter().enumerate() {
            out.insert(name, grads.wrt_or_zeros(self.ids[i], t.shape()))
                .unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_preserved() {
        let mut p = ParamSet::new();
        p.insert("w2", Tensor::scalar(1.0)).unwrap();
        p.insert("w1", Tensor::scalar(2.0)).unwrap();
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, ["w2", "w1"]);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(1.0)).unwrap();
        assert_eq!(
            p.insert("w", Tensor::scalar(2.0)),
            Err(ParamError::Duplicate("w".into()))
        );
    }

    #[test]
    fn set_enforces_shape() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let err = p.set("w", Tensor::scalar(0.0)).unwrap_err();
        assert!(matches!(err, ParamError::ShapeMismatch { .. }));
    }

    #[test]
    fn finds_non_finite() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        p.insert("b", Tensor::vector(vec![3.0, f64::NAN])).unwrap();
        let (name, i, v) = p.find_non_finite().unwrap();
        assert_eq!((name, i), ("b", 1));
        assert!(v.is_nan());
    }
}
