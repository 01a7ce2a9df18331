//! Named parameter storage with deterministic iteration order and
//! per-parameter gradient accumulators.

use std::collections::HashMap;

use super::{Mat, NumericsError};

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Mat,
    grad: Mat,
}

/// Collection of named parameter matrices. Iteration order is insertion
/// order, so gradient reductions and serialization are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.entries.len();
        let grad = Mat::zeros(value.rows(), value.cols());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, value, grad });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameter ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// `(name, value)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Mat::zeros(e.value.rows(), e.value.cols());
        }
    }

    /// Add `delta` into the gradient accumulator of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Mat) -> Result<(), NumericsError> {
        let e = &mut self.entries[id.0];
        if e.grad.shape() != delta.shape() {
            return Err(NumericsError::ShapeMismatch {
                context: "accumulate_grad",
                expected: format!("{:?}", e.grad.shape()),
                actual: format!("{:?}", delta.shape()),
            });
        }
        e.grad.add_assign(delta);
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Overwrite every parameter value from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(dst.name, src.name, "parameter layout mismatch");
            dst.value = src.value.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_stable() {
        let mut store = ParamStore::new();
        store.register("b", Mat::zeros(1, 1));
        store.register("a", Mat::zeros(2, 2));
        let names: Vec<_> = store.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, vec!["b", "a"]);
    }

    #[test]
    fn grads_match_shapes() {
        let mut store = ParamStore::new();
        let id = store.register("w", Mat::zeros(2, 3));
        assert_eq!(store.grad(id).shape(), (2, 3));
        assert!(store.accumulate_grad(id, &Mat::zeros(3, 2)).is_err());
        assert!(store.accumulate_grad(id, &Mat::filled(2, 3, 1.0)).is_ok());
        assert_eq!(store.grad(id).get(1, 2), 1.0);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Mat::zeros(1, 1));
        store.register("w", Mat::zeros(1, 1));
    }
}
