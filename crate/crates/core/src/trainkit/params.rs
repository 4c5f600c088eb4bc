use indexmap::IndexMap;

use crate::autodiff::{Grads, Graph, Var};
use crate::error::{param, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Index of a registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named trainable matrices.
///
/// Names are unique and shapes never change once registered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    entries: IndexMap<String, Mat<T>>,
}

/// Parameters placed on a specific [`Graph`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: IndexMap::new() }
    }

    /// Adds a parameter. Panics if `name` is already taken: layer names are fixed by the
    /// model code, so a collision is a programming error.
    pub fn register(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter name {name}");
        let (idx, _) = self.entries.insert_full(name, value);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values(&self) -> impl Iterator<Item = &Mat<T>> {
        self.entries.values()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat<T>> {
        self.entries.values_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Mat::len).sum()
    }

    /// Concatenation of every parameter in registration order.
    pub fn flat(&self) -> Vec<T> {
        self.entries.values().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return param(format!("flat view has {} values, expected {}", flat.len(), self.num_scalars()));
        }
        let mut off = 0;
        for m in self.entries.values_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Places every parameter on the graph, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|m| if trainable { g.leaf(m.clone()) } else { g.constant(m.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradient for each parameter, zero where the loss does not depend on it.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Grads<T>) -> Vec<Mat<T>> {
        self.entries
            .values()
            .zip(&bound.vars)
            .map(|(m, &v)| grads.take(v).unwrap_or_else(|| Mat::zeros(m.rows(), m.cols())))
            .collect()
    }

    /// Overwrites values from `other` by name; every name must exist with the same shape.
    pub fn load_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if other.len() != self.len() {
            return crate::error::format(format!(
                "parameter count mismatch: {} stored, {} expected",
                other.len(),
                self.len()
            ));
        }
        for (name, dst) in self.entries.iter_mut() {
            let Some(src) = other.entries.get(name) else {
                return crate::error::format(format!("missing parameter {name}"));
            };
            if src.shape() != dst.shape() {
                return crate::error::format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}
