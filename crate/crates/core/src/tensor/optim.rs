//! SGD with momentum and Adam.
//!
//! Both refuse to touch any parameter if a single gradient is non-finite.
//! Weight decay is classic L2: `g ← g + wd·w` before the momentum update.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum SGD: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if !store.grads_finite() {
            return Err(Error::NonFinite("gradient (sgd step skipped)".into()));
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let lr = S::lit(self.config.lr);
        let mu = S::lit(self.config.momentum);
        let wd = S::lit(self.config.weight_decay);
        for (p, vel) in store.iter_mut().zip(self.velocity.iter_mut()) {
            let v = vel.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((w, &g), m) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(v.data_mut())
            {
                let g = g + wd * *w;
                *m = mu * *m + g;
                *w -= lr * *m;
            }
        }
        Ok(())
    }

    pub fn velocity(&self, i: usize) -> Option<&Tensor<S>> {
        self.velocity.get(i).and_then(|v| v.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    state: Vec<Option<AdamState<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if !store.grads_finite() {
            return Err(Error::NonFinite("gradient (adam step skipped)".into()));
        }
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let c = self.config;
        for (p, st) in store.iter_mut().zip(self.state.iter_mut()) {
            let st = st.get_or_insert_with(|| AdamState {
                step: 0,
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
            let step_size = S::lit(c.lr / bc1);
            let bc2_sqrt = S::lit(bc2.sqrt());
            let eps = S::lit(c.eps);
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(st.m.data_mut())
                .zip(st.v.data_mut())
            {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                *w -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    pub fn state(&self, i: usize) -> Option<&AdamState<S>> {
        self.state.get(i).and_then(|s| s.as_ref())
    }

    pub fn states(&self) -> &[Option<AdamState<S>>] {
        &self.state
    }

    pub fn set_states(&mut self, states: Vec<Option<AdamState<S>>>) {
        self.state = states;
    }
}
