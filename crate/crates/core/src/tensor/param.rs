use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor};
use crate::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

/// Named parameters owned by one module (actor, critics, CNN, ...).
///
/// Every store carries a process-unique id so a single [`Graph`](super::Graph)
/// can mix parameters from several stores and route gradients back correctly.
#[derive(Debug)]
pub struct ParamStore<S> {
    uid: u64,
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> Clone for ParamStore<S> {
    /// Clones get a fresh uid: they are independent parameter sets.
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm().as_f64()).sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrite all values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    /// `self ← (1 − tau)·self + tau·other` for every parameter.
    pub fn blend_from(&mut self, other: &ParamStore<S>, tau: f64) -> Result<()> {
        self.check_same_layout(other)?;
        let t = S::lit(tau);
        let keep = S::lit(1.0 - tau);
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, &y) in a.value.data_mut().iter_mut().zip(b.value.data()) {
                *x = keep * *x + t * y;
            }
        }
        Ok(())
    }

    fn check_same_layout(&self, other: &ParamStore<S>) -> Result<()> {
        if self.params.len() != other.params.len()
            || self
                .params
                .iter()
                .zip(&other.params)
                .any(|(a, b)| a.value.shape() != b.value.shape())
        {
            return Err(Error::shape("param store", "layouts differ"));
        }
        Ok(())
    }

    /// Cast every value to another scalar type (gradients reset).
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }
}

/// Gradients produced by one backward pass, keyed by (store uid, parameter).
#[derive(Debug, Default)]
pub struct Gradients<S> {
    pub(crate) entries: Vec<(u64, ParamId, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    /// Add the gradients that belong to `store` into its `grad` buffers.
    /// Returns how many parameters received a contribution.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) -> usize {
        let mut n = 0;
        for (uid, id, g) in &self.entries {
            if *uid == store.uid {
                store.params[id.0].grad.add_assign(g);
                n += 1;
            }
        }
        n
    }

    pub fn touches(&self, store: &ParamStore<S>) -> bool {
        self.entries.iter().any(|(uid, _, _)| *uid == store.uid)
    }

    /// Total gradient of one parameter, summed over every place it was bound.
    pub fn get(&self, store: &ParamStore<S>, id: ParamId) -> Option<Tensor<S>> {
        let mut parts = self
            .entries
            .iter()
            .filter(|(uid, pid, _)| *uid == store.uid && *pid == id)
            .map(|(_, _, g)| g);
        let mut total = parts.next()?.clone();
        for g in parts {
            total.add_assign(g);
        }
        Some(total)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
