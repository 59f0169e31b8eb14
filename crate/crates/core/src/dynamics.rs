//! Epoch embeddings, the recurrent environment model and the reward decoder.
//!
//! `z_k` is the GRU hidden state after reading the embeddings of epochs
//! `1..=k` from a zero initial state. The decoder regresses episode rewards
//! from `[state, action, z]`; its squared error is the only signal that
//! trains the embeddings and the GRU (unless joint SAC gradients are enabled).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Transition, STATE_DIM};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::nn::{bind, Bind, GruCell, Mlp};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    pub decoder_hidden: Vec<usize>,
    pub emb_std: f64,
    pub lr: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            emb_dim: 128,
            hidden: 128,
            decoder_hidden: vec![300, 300],
            emb_std: 0.1,
            lr: 1e-3,
        }
    }
}

/// Environment representation for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvRepr {
    pub z: Vec<f64>,
    pub epoch: usize,
}

pub struct EnvModel<S: Scalar> {
    pub store: ParamStore<S>,
    pub emb: ParamId,
    pub gru: GruCell,
    pub decoder: Mlp,
    pub config: DynamicsConfig,
    pub epochs: usize,
    /// When set, every `z` is the zero vector (the "without embeddings" arm).
    pub zero_z: bool,
    opt: Adam<S>,
}

impl<S: Scalar> EnvModel<S> {
    pub fn new<R: Rng + ?Sized>(epochs: usize, config: DynamicsConfig, zero_z: bool, rng: &mut R) -> Result<Self> {
        if epochs == 0 || config.emb_dim == 0 || config.hidden == 0 {
            return Err(Error::Config("environment model needs epochs, emb_dim, hidden >= 1".into()));
        }
        let mut store = ParamStore::new();
        let emb = store.add("emb", Tensor::randn(&[epochs, config.emb_dim], config.emb_std, rng));
        let gru = GruCell::new(&mut store, "gru", config.emb_dim, config.hidden, rng);
        let decoder = Mlp::new(
            &mut store,
            "decoder",
            STATE_DIM + 1 + config.hidden,
            &config.decoder_hidden,
            1,
            rng,
        );
        let opt = Adam::new(AdamConfig::with_lr(config.lr));
        Ok(EnvModel {
            store,
            emb,
            gru,
            decoder,
            config,
            epochs,
            zero_z,
            opt,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.config.hidden
    }

    fn check_epoch(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.epochs {
            return Err(Error::InvalidArgument(format!("epoch {k} outside 1..={}", self.epochs)));
        }
        Ok(())
    }

    /// Hidden states `h_1..h_k`, each `[1, hidden]`, reading parameters from `store`.
    pub fn hidden_states_with(&self, g: &mut Graph<S>, store: &ParamStore<S>, k: usize, b: Bind) -> Result<Vec<Var>> {
        self.check_epoch(k)?;
        let emb = bind(g, store, self.emb, b);
        let mut h = g.constant(Tensor::zeros(&[1, self.config.hidden]));
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let psi = g.gather_rows(emb, &[i])?;
            h = self.gru.forward(g, store, psi, h, b)?;
            out.push(h);
        }
        Ok(out)
    }

    /// `z` rows for a batch of 1-based epoch indices, `[B, hidden]`.
    pub fn z_batch_with(&self, g: &mut Graph<S>, store: &ParamStore<S>, epochs: &[usize], b: Bind) -> Result<Var> {
        if self.zero_z {
            for &e in epochs {
                self.check_epoch(e)?;
            }
            return Ok(g.constant(Tensor::zeros(&[epochs.len(), self.config.hidden])));
        }
        let k = epochs.iter().copied().max().unwrap_or(1);
        let hs = self.hidden_states_with(g, store, k, b)?;
        let stacked = g.concat_rows(&hs)?;
        let idx: Vec<usize> = epochs.iter().map(|&e| e - 1).collect();
        g.gather_rows(stacked, &idx)
    }

    pub fn z_batch(&self, g: &mut Graph<S>, epochs: &[usize], b: Bind) -> Result<Var> {
        self.z_batch_with(g, &self.store, epochs, b)
    }

    pub fn env_repr(&self, k: usize) -> Result<EnvRepr> {
        let mut g = Graph::new();
        let z = self.z_batch(&mut g, &[k], Bind::Frozen)?;
        Ok(EnvRepr {
            z: g.value(z).data().iter().map(|v| v.as_f64()).collect(),
            epoch: k,
        })
    }

    /// Predicted rewards `[B, 1]` for normalized states `[B, 9]`, actions `[B, 1]` and `z`.
    pub fn decode_with(&self, g: &mut Graph<S>, store: &ParamStore<S>, s: Var, a: Var, z: Var, b: Bind) -> Result<Var> {
        let x = g.concat_cols(&[s, a, z])?;
        self.decoder.forward(g, store, x, b)
    }

    /// Mean squared reconstruction error over a batch, built on `g`.
    pub fn recon_loss_with(&self, g: &mut Graph<S>, store: &ParamStore<S>, batch: &[Transition], b: Bind) -> Result<Var> {
        let (s, a, r, epochs) = batch_inputs::<S>(batch)?;
        let s = g.constant(s);
        let a = g.constant(a);
        let r = g.constant(r);
        let z = self.z_batch_with(g, store, &epochs, b)?;
        let pred = self.decode_with(g, store, s, a, z, b)?;
        let diff = g.sub(pred, r)?;
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }

    /// One Adam step on decoder, GRU and embeddings. Returns the batch MSE.
    pub fn recon_update(&mut self, batch: &[Transition]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.recon_loss_with(&mut g, &self.store, batch, Bind::Train)?;
        let value = g.scalar_value(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.store.zero_grad();
        grads.accumulate_into(&mut self.store);
        self.opt.step(&mut self.store)?;
        Ok(value)
    }

    /// Apply an Adam step with gradients already accumulated in `store`
    /// (used when SAC losses train `z` jointly).
    pub fn step_accumulated(&mut self) -> Result<()> {
        self.opt.step(&mut self.store)
    }

    pub fn optimizer(&self) -> &Adam<S> {
        &self.opt
    }

    pub fn push_to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_store(prefix, &self.store);
        push_adam(ck, &format!("{prefix}.opt"), &self.opt);
    }

    pub fn load_from_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        ck.load_store(prefix, &mut self.store)?;
        load_adam(ck, &format!("{prefix}.opt"), &mut self.opt, &self.store)
    }
}

/// `(states [B,9], actions [B,1], rewards [B,1], epochs)`.
pub type BatchInputs<S> = (Tensor<S>, Tensor<S>, Tensor<S>, Vec<usize>);

/// Stack a batch into [`BatchInputs`].
pub fn batch_inputs<S: Scalar>(batch: &[Transition]) -> Result<BatchInputs<S>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len();
    let s: Vec<f64> = batch.iter().flat_map(|t| t.s.norm).collect();
    let a: Vec<f64> = batch.iter().map(|t| t.a).collect();
    let r: Vec<f64> = batch.iter().map(|t| t.r).collect();
    Ok((
        Tensor::from_f64(&[n, STATE_DIM], &s)?,
        Tensor::from_f64(&[n, 1], &a)?,
        Tensor::from_f64(&[n, 1], &r)?,
        batch.iter().map(|t| t.epoch).collect(),
    ))
}

/// Adam moments as `<prefix>.<i>.m` / `.v` tensors plus a `.step` scalar.
pub(crate) fn push_adam<S: Scalar>(ck: &mut Checkpoint, prefix: &str, opt: &Adam<S>) {
    for (i, st) in opt.states().iter().enumerate() {
        if let Some(st) = st {
            ck.push(format!("{prefix}.{i}.m"), &st.m);
            ck.push(format!("{prefix}.{i}.v"), &st.v);
            ck.push(format!("{prefix}.{i}.step"), &Tensor::<f64>::scalar(st.step as f64));
        }
    }
}

pub(crate) fn load_adam<S: Scalar>(ck: &Checkpoint, prefix: &str, opt: &mut Adam<S>, store: &ParamStore<S>) -> Result<()> {
    let mut states = Vec::with_capacity(store.len());
    for i in 0..store.len() {
        let m = ck.get(&format!("{prefix}.{i}.m"));
        let v = ck.get(&format!("{prefix}.{i}.v"));
        let step = ck.get(&format!("{prefix}.{i}.step"));
        states.push(match (m, v, step) {
            (Some(m), Some(v), Some(step)) => Some(crate::tensor::optim::AdamState {
                step: step.item() as u64,
                m: m.cast(),
                v: v.cast(),
            }),
            _ => None,
        });
    }
    opt.set_states(states);
    Ok(())
}
