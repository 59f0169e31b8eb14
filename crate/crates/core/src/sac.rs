//! Soft actor-critic over the one-dimensional pruning action.
//!
//! The actor outputs `(μ, log σ)` for a Gaussian pre-activation `u`; the
//! action is `a = (1 + tanh u) / 2`, so `a ∈ [0, 1)`. Policy, twin critics
//! and their targets all take the environment representation `z` as an
//! extra input.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{load_adam, push_adam, EnvModel};
use crate::env::{Transition, STATE_DIM};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::nn::{Bind, Mlp};
use crate::tensor::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::{Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            hidden: vec![300, 300],
            alpha: 0.1,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            log_std_min: -20.0,
            log_std_max: 2.0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.alpha < 0.0 {
            bad.push(format!("alpha {} < 0", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            bad.push(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            bad.push(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            bad.push("learning rates must be positive".into());
        }
        if self.log_std_min >= self.log_std_max {
            bad.push("log_std_min must be below log_std_max".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// `(1 + tanh u) / 2`, kept strictly below one.
pub fn squash(u: f64) -> f64 {
    (0.5 * (1.0 + u.tanh())).min(1.0 - f64::EPSILON)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `log |da/du|` for `a = (1 + tanh u) / 2`, in a form that stays finite
/// for large `|u|`.
pub fn log_det_jacobian(u: f64) -> f64 {
    LN_2 - 2.0 * u - 2.0 * softplus(-2.0 * u)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionSample {
    pub a: f64,
    pub log_prob: f64,
    pub u: f64,
    pub mu: f64,
    pub log_std: f64,
}

/// Squashed sample from `N(μ, σ²)` driven by the standard normal draw `eps`.
pub fn squashed_sample(mu: f64, log_std: f64, eps: f64) -> ActionSample {
    let u = mu + log_std.exp() * eps;
    let log_n = -0.5 * eps * eps - log_std - HALF_LN_2PI;
    ActionSample {
        a: squash(u),
        log_prob: log_n - log_det_jacobian(u),
        u,
        mu,
        log_std,
    }
}

/// `r + γ (1 − d) (min Q' − α log π')`.
pub fn bellman_target(r: f64, done: bool, gamma: f64, alpha: f64, min_q_next: f64, logp_next: f64) -> f64 {
    let cont = if done { 0.0 } else { 1.0 };
    r + gamma * cont * (min_q_next - alpha * logp_next)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticLosses {
    pub q1: f64,
    pub q2: f64,
}

pub struct SacAgent<S: Scalar> {
    pub actor_store: ParamStore<S>,
    pub actor: Mlp,
    pub critic_stores: [ParamStore<S>; 2],
    pub critics: [Mlp; 2],
    pub target_stores: [ParamStore<S>; 2],
    pub config: SacConfig,
    pub z_dim: usize,
    actor_opt: Adam<S>,
    critic_opts: [Adam<S>; 2],
}

struct Sampled {
    a: Var,
    log_prob: Var,
}

impl<S: Scalar> SacAgent<S> {
    pub fn new<R: Rng + ?Sized>(z_dim: usize, config: SacConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut actor_store = ParamStore::new();
        let actor = Mlp::new(&mut actor_store, "actor", STATE_DIM + z_dim, &config.hidden, 2, rng);
        let mk_critic = |rng: &mut R| {
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "critic", STATE_DIM + 1 + z_dim, &config.hidden, 1, rng);
            (store, mlp)
        };
        let (s1, c1) = mk_critic(rng);
        let (s2, c2) = mk_critic(rng);
        let target_stores = [s1.clone(), s2.clone()];
        Ok(SacAgent {
            actor_store,
            actor,
            critic_stores: [s1, s2],
            critics: [c1, c2],
            target_stores,
            actor_opt: Adam::new(AdamConfig::with_lr(config.actor_lr)),
            critic_opts: [
                Adam::new(AdamConfig::with_lr(config.critic_lr)),
                Adam::new(AdamConfig::with_lr(config.critic_lr)),
            ],
            config,
            z_dim,
        })
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.z_dim {
            return Err(Error::InvalidArgument(format!("z has {} entries, expected {}", z.len(), self.z_dim)));
        }
        Ok(())
    }

    /// `(μ, clamped log σ)`, each `[B, 1]`.
    fn heads(&self, g: &mut Graph<S>, actor: &ParamStore<S>, s: Var, z: Var, b: Bind) -> Result<(Var, Var)> {
        let x = g.concat_cols(&[s, z])?;
        let out = self.actor.forward(g, actor, x, b)?;
        let mu = g.slice_cols(out, 0, 1)?;
        let ls = g.slice_cols(out, 1, 1)?;
        let ls = g.clamp(ls, self.config.log_std_min, self.config.log_std_max);
        Ok((mu, ls))
    }

    /// Reparameterized squashed sample with noise `eps` (`[B, 1]`) and its
    /// log-density, built on `g`.
    fn sample_var(&self, g: &mut Graph<S>, actor: &ParamStore<S>, s: Var, z: Var, b: Bind, eps: Tensor<S>) -> Result<Sampled> {
        let (mu, ls) = self.heads(g, actor, s, z, b)?;
        let half_eps_sq = eps.map(|e| S::lit(-0.5 * e.as_f64() * e.as_f64() - HALF_LN_2PI));
        let eps = g.constant(eps);
        let std = g.exp(ls);
        let noise = g.mul(std, eps)?;
        let u = g.add(mu, noise)?;
        let c = g.constant(half_eps_sq);
        let neg_ls = g.scale(ls, -1.0);
        let log_n = g.add(c, neg_ls)?;
        // log|da/du| = ln2 − 2u − 2·softplus(−2u)
        let m2u = g.scale(u, -2.0);
        let sp = g.softplus(m2u);
        let sp2 = g.scale(sp, -2.0);
        let ldj = g.add(m2u, sp2)?;
        let ldj = g.add_scalar(ldj, LN_2);
        let log_prob = g.sub(log_n, ldj)?;
        let t = g.tanh(u);
        let t1 = g.add_scalar(t, 1.0);
        let a = g.scale(t1, 0.5);
        Ok(Sampled { a, log_prob })
    }

    fn critic_input(&self, g: &mut Graph<S>, s: Var, a: Var, z: Var) -> Result<Var> {
        g.concat_cols(&[s, a, z])
    }

    /// Policy head values `(μ, log σ)` for one state.
    pub fn policy_params(&self, state: &[f64; STATE_DIM], z: &[f64]) -> Result<(f64, f64)> {
        self.check_z(z)?;
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_f64(&[1, STATE_DIM], state)?);
        let zv = g.constant(Tensor::from_f64(&[1, self.z_dim], z)?);
        let (mu, ls) = self.heads(&mut g, &self.actor_store, s, zv, Bind::Frozen)?;
        Ok((g.scalar_value(mu).as_f64(), g.scalar_value(ls).as_f64()))
    }

    /// Sample an action; `deterministic` returns the squashed mean.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &[f64; STATE_DIM],
        z: &[f64],
        deterministic: bool,
        rng: &mut R,
    ) -> Result<ActionSample> {
        let (mu, ls) = self.policy_params(state, z)?;
        let eps = if deterministic { 0.0 } else { StandardNormal.sample(rng) };
        let out = squashed_sample(mu, ls, eps);
        if !out.a.is_finite() || !out.log_prob.is_finite() {
            return Err(Error::NonFinite(format!("policy output mu={mu} log_std={ls}")));
        }
        Ok(out)
    }

    /// Online critic values for one `(s, a, z)`.
    pub fn q_values(&self, state: &[f64; STATE_DIM], a: f64, z: &[f64]) -> Result<[f64; 2]> {
        self.check_z(z)?;
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_f64(&[1, STATE_DIM], state)?);
        let av = g.constant(Tensor::from_f64(&[1, 1], &[a])?);
        let zv = g.constant(Tensor::from_f64(&[1, self.z_dim], z)?);
        let x = self.critic_input(&mut g, s, av, zv)?;
        let mut out = [0.0; 2];
        for ((o, critic), store) in out.iter_mut().zip(&self.critics).zip(&self.critic_stores) {
            let q = critic.forward(&mut g, store, x, Bind::Frozen)?;
            *o = g.scalar_value(q).as_f64();
        }
        Ok(out)
    }

    /// Soft Bellman targets for a batch, computed without gradients.
    pub fn critic_targets<R: Rng + ?Sized>(&self, env: &EnvModel<S>, batch: &[Transition], rng: &mut R) -> Result<Vec<f64>> {
        let n = batch.len();
        let s_next: Vec<f64> = batch.iter().flat_map(|t| t.s_next.norm).collect();
        let epochs: Vec<usize> = batch.iter().map(|t| t.epoch).collect();
        let mut g = Graph::new();
        let sn = g.constant(Tensor::from_f64(&[n, STATE_DIM], &s_next)?);
        let z = env.z_batch(&mut g, &epochs, Bind::Frozen)?;
        let z = g.detach(z);
        let eps = Tensor::<S>::randn(&[n, 1], 1.0, rng);
        let smp = self.sample_var(&mut g, &self.actor_store, sn, z, Bind::Frozen, eps)?;
        let x = self.critic_input(&mut g, sn, smp.a, z)?;
        let q1 = self.critics[0].forward(&mut g, &self.target_stores[0], x, Bind::Frozen)?;
        let q2 = self.critics[1].forward(&mut g, &self.target_stores[1], x, Bind::Frozen)?;
        let qmin = g.minimum(q1, q2)?;
        let qmin = g.value(qmin).data().to_vec();
        let logp = g.value(smp.log_prob).data().to_vec();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(j, t)| {
                bellman_target(
                    t.r,
                    t.done,
                    self.config.gamma,
                    self.config.alpha,
                    qmin[j].as_f64(),
                    logp[j].as_f64(),
                )
            })
            .collect())
    }

    /// Per-critic mean squared error against `targets`, with `z` drawn from
    /// `env` evaluated at `env_store`.
    #[allow(clippy::too_many_arguments)]
    pub fn critic_loss_with(
        &self,
        g: &mut Graph<S>,
        critics: [&ParamStore<S>; 2],
        env: &EnvModel<S>,
        env_store: &ParamStore<S>,
        batch: &[Transition],
        targets: &[f64],
        z_bind: Bind,
    ) -> Result<[Var; 2]> {
        let n = batch.len();
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!("{} targets for {n} transitions", targets.len())));
        }
        let (s, a, _, epochs) = crate::dynamics::batch_inputs::<S>(batch)?;
        let s = g.constant(s);
        let a = g.constant(a);
        let y = g.constant(Tensor::from_f64(&[n, 1], targets)?);
        let z = env.z_batch_with(g, env_store, &epochs, z_bind)?;
        let x = self.critic_input(g, s, a, z)?;
        let mut terms = [x; 2];
        for i in 0..2 {
            let q = self.critics[i].forward(g, critics[i], x, Bind::Train)?;
            let d = g.sub(q, y)?;
            let sq = g.square(d);
            terms[i] = g.mean(sq);
        }
        Ok(terms)
    }

    /// `mean(α log π − min Q)` with reparameterization noise `eps` (`[B, 1]`)
    /// and the online critics frozen.
    #[allow(clippy::too_many_arguments)]
    pub fn policy_loss_with(
        &self,
        g: &mut Graph<S>,
        actor: &ParamStore<S>,
        env: &EnvModel<S>,
        env_store: &ParamStore<S>,
        batch: &[Transition],
        eps: Tensor<S>,
        z_bind: Bind,
    ) -> Result<Var> {
        let (s, _, _, epochs) = crate::dynamics::batch_inputs::<S>(batch)?;
        let s = g.constant(s);
        let z = env.z_batch_with(g, env_store, &epochs, z_bind)?;
        let smp = self.sample_var(g, actor, s, z, Bind::Train, eps)?;
        let x = self.critic_input(g, s, smp.a, z)?;
        let q1 = self.critics[0].forward(g, &self.critic_stores[0], x, Bind::Frozen)?;
        let q2 = self.critics[1].forward(g, &self.critic_stores[1], x, Bind::Frozen)?;
        let qmin = g.minimum(q1, q2)?;
        let ent = g.scale(smp.log_prob, self.config.alpha);
        let per = g.sub(ent, qmin)?;
        Ok(g.mean(per))
    }

    /// One Adam step on both critics toward the soft Bellman targets.
    ///
    /// With `joint_z` the critic loss also trains the environment model.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        env: &mut EnvModel<S>,
        batch: &[Transition],
        joint_z: bool,
        rng: &mut R,
    ) -> Result<CriticLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let y = self.critic_targets(env, batch, rng)?;
        let mut g = Graph::new();
        let zb = if joint_z { Bind::Train } else { Bind::Frozen };
        let critics = [&self.critic_stores[0], &self.critic_stores[1]];
        let terms = self.critic_loss_with(&mut g, critics, env, &env.store, batch, &y, zb)?;
        let losses = terms.map(|t| g.scalar_value(t).as_f64());
        if !losses.iter().all(|l| l.is_finite()) {
            return Err(Error::NonFinite(format!("critic losses {losses:?}")));
        }
        let total = g.add(terms[0], terms[1])?;
        let grads = g.backward(total)?;
        for i in 0..2 {
            self.critic_stores[i].zero_grad();
            grads.accumulate_into(&mut self.critic_stores[i]);
            self.critic_opts[i].step(&mut self.critic_stores[i])?;
        }
        if joint_z {
            env.store.zero_grad();
            grads.accumulate_into(&mut env.store);
            env.step_accumulated()?;
        }
        Ok(CriticLosses {
            q1: losses[0],
            q2: losses[1],
        })
    }

    /// One Adam step on the actor minimizing `E[α log π − min Q]` with the
    /// critics frozen. Returns the loss.
    pub fn policy_update<R: Rng + ?Sized>(
        &mut self,
        env: &mut EnvModel<S>,
        batch: &[Transition],
        joint_z: bool,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let eps = Tensor::<S>::randn(&[batch.len(), 1], 1.0, rng);
        let mut g = Graph::new();
        let zb = if joint_z { Bind::Train } else { Bind::Frozen };
        let loss = self.policy_loss_with(&mut g, &self.actor_store, env, &env.store, batch, eps, zb)?;
        let value = g.scalar_value(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("policy loss {value}")));
        }
        let grads = g.backward(loss)?;
        self.actor_store.zero_grad();
        grads.accumulate_into(&mut self.actor_store);
        self.actor_opt.step(&mut self.actor_store)?;
        if joint_z {
            env.store.zero_grad();
            grads.accumulate_into(&mut env.store);
            env.step_accumulated()?;
        }
        Ok(value)
    }

    /// `θ' ← (1 − τ) θ' + τ θ` for both target critics.
    pub fn polyak_update(&mut self) -> Result<()> {
        for i in 0..2 {
            self.target_stores[i].blend_from(&self.critic_stores[i], self.config.tau)?;
        }
        Ok(())
    }

    pub fn push_to_checkpoint(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_store(&format!("{prefix}.actor"), &self.actor_store);
        push_adam(ck, &format!("{prefix}.actor.opt"), &self.actor_opt);
        for i in 0..2 {
            ck.push_store(&format!("{prefix}.critic{i}"), &self.critic_stores[i]);
            ck.push_store(&format!("{prefix}.target{i}"), &self.target_stores[i]);
            push_adam(ck, &format!("{prefix}.critic{i}.opt"), &self.critic_opts[i]);
        }
    }

    pub fn load_from_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        ck.load_store(&format!("{prefix}.actor"), &mut self.actor_store)?;
        load_adam(ck, &format!("{prefix}.actor.opt"), &mut self.actor_opt, &self.actor_store)?;
        for i in 0..2 {
            ck.load_store(&format!("{prefix}.critic{i}"), &mut self.critic_stores[i])?;
            ck.load_store(&format!("{prefix}.target{i}"), &mut self.target_stores[i])?;
            load_adam(ck, &format!("{prefix}.critic{i}.opt"), &mut self.critic_opts[i], &self.critic_stores[i])?;
        }
        Ok(())
    }
}
