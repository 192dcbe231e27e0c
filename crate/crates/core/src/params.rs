//! Named parameter storage shared by every layer of a model.
//!
//! Layers hold [`ParamId`]s instead of tensors. A forward pass binds the whole
//! store onto a tape once; gradients come back in store order, which is also
//! the serialization order.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (batch-norm running statistics, input normalization) are
    /// stored and serialized but never updated by the optimizer.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name: name.to_owned(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Ids in store order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Replaces every value with the one stored under the same name in
    /// `other`. Names and shapes must match exactly.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Puts every entry on `tape`: trainable ones as tracked leaves, buffers
    /// as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    tape.leaf(e.value.clone())
                } else {
                    tape.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Same as [`bind`](Self::bind) but nothing is tracked; used for
    /// inference.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound { vars: self.entries.iter().map(|e| tape.constant(e.value.clone())).collect() }
    }
}

pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients aligned with the store; `None` for buffers.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}
