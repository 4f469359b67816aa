//! Named parameter storage shared between models, the optimizer, and
//! checkpoint i/o.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::element::Element;
use super::graph::{Tape, Var};
use super::kernels::truncated_normal;

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<E: Element> {
    pub name: String,
    pub value: Arc<ArrayD<E>>,
    pub trainable: bool,
}

/// Ordered, name-indexed tensor store. Registration order is deterministic
/// and is the checkpoint serialization order.
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<E>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_trunc_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || truncated_normal(rng, std));
        self.add(name, value, true)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::zeros(IxDyn(shape)), true)
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, ArrayD::from_elem(IxDyn(shape), E::one()), true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<E> {
        &self.entries[id.0].value
    }

    pub fn arc(&self, id: ParamId) -> Arc<ArrayD<E>> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; clones the storage only if a tape still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<E> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<E>) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "shape change for {:?}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value);
    }

    /// Total number of scalar elements across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Bind every entry onto a tape, in store order. Trainable entries
    /// become differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.shared(Arc::clone(&e.value), e.trainable))
            .collect()
    }

    /// Snapshot of all values (used for best-epoch checkpointing).
    pub fn snapshot(&self) -> Vec<ArrayD<E>> {
        self.entries.iter().map(|e| (*e.value).clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[ArrayD<E>]) {
        assert_eq!(snapshot.len(), self.entries.len());
        for (entry, value) in self.entries.iter_mut().zip(snapshot) {
            entry.value = Arc::new(value.clone());
        }
    }
}
