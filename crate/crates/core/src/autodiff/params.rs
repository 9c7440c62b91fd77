use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::Tensor;
use crate::real::Real;

/// Handle to an entry of a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pid(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers such as batch-norm running statistics are stored alongside
    /// the weights but never receive gradients.
    pub trainable: bool,
}

/// Named, ordered collection of every weight and buffer of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, Pid>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Pid {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = Pid(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        id
    }

    /// Uniform(-bound, bound) initialisation, the usual fan-in rule for dense
    /// and convolution weights.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Pid {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        self.insert(name, Tensor::from_vec(rows, cols, data), true)
    }

    pub fn normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Pid {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z)
            })
            .collect();
        self.insert(name, Tensor::from_vec(rows, cols, data), true)
    }

    pub fn constant(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        v: f64,
        trainable: bool,
    ) -> Pid {
        self.insert(
            name,
            Tensor::from_vec(rows, cols, vec![T::of(v); rows * cols]),
            trainable,
        )
    }

    #[inline]
    pub fn get(&self, id: Pid) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: Pid) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<Pid> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: Pid) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = Pid> + '_ {
        (0..self.entries.len()).map(Pid)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; untouched parameters
/// stay unallocated.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn new(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub(crate) fn slot(&mut self, id: Pid, len: usize) -> &mut Vec<T> {
        self.slots[id.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn get(&self, id: Pid) -> Option<&[T]> {
        self.slots[id.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}
