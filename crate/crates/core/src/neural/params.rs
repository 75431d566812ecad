use std::collections::HashMap;

use rand::Rng;

use super::array::Array;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with matching gradient buffers, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Array>,
    grads: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Array::zeros(value.rows(), value.cols()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Weight matrix drawn from U(-bound, bound).
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        self.insert(name, Array::uniform(rows, cols, bound, rng))
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, Array::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Replace every value with the same-named array from `other`.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Dimension("parameter sets have different layouts".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Dimension("parameter shape mismatch".into()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_buffers_track_shapes() {
        let mut ps = ParameterSet::new();
        let a = ps.insert_zeros("a", 2, 3).unwrap();
        let b = ps.insert("b", Array::scalar(1.0)).unwrap();
        assert_eq!(ps.grad(a).shape(), [2, 3]);
        assert_eq!(ps.grad(b).shape(), [1, 1]);
        assert_eq!(ps.id("b"), Some(b));
        assert_eq!(ps.num_scalars(), 7);
        assert!(ps.insert_zeros("a", 1, 1).is_err());
    }
}
