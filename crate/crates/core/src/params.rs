//! Named parameter storage shared by layers, optimizers and checkpoints.

use std::cell::RefCell;

use crate::array::DenseArray;
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: DenseArray,
    trainable: bool,
}

/// Ordered collection of named arrays. Trainable entries receive gradients;
/// the others are buffers (actnorm flags, fixed permutations).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: DenseArray, trainable: bool) -> ParamId {
        assert!(self.id_of(name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: DenseArray) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: DenseArray) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: DenseArray) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape("param set", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }
}

/// Binds a [`ParamStore`] to a tape for one forward pass. Each parameter is
/// placed on the tape at most once, so its gradient collects every use.
pub struct Ctx<'t, 'p> {
    tape: &'t Tape,
    params: &'p ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 'p> Ctx<'t, 'p> {
    pub fn new(tape: &'t Tape, params: &'p ParamStore) -> Self {
        Self {
            tape,
            params,
            bound: RefCell::new(vec![None; params.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.params.is_trainable(id) {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradient for every trainable parameter, in store order. Parameters
    /// the pass never touched get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(ParamId, DenseArray)> {
        let bound = self.bound.borrow();
        self.params
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let g = match bound[id.0] {
                    Some(v) => grads.get(v),
                    None => DenseArray::zeros(self.params.get(id).shape()),
                };
                (id, g)
            })
            .collect()
    }
}
