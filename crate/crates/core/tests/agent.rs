use coprune::dynamics::{DynamicsConfig, EnvModel};
use coprune::env::{build_state, EnvSpec, Transition};
use coprune::model::arch::ArchDescription;
use coprune::sac::{bellman_target, log_det_jacobian, squash, squashed_sample, SacAgent, SacConfig};
use coprune::tensor::checkpoint::Checkpoint;
use coprune::tensor::gradcheck::{self, GradCheckConfig};
use coprune::tensor::nn::Bind;
use coprune::tensor::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small_dyn() -> DynamicsConfig {
    DynamicsConfig {
        emb_dim: 16,
        hidden: 16,
        decoder_hidden: vec![64, 64],
        emb_std: 0.1,
        lr: 1e-3,
    }
}

fn small_sac() -> SacConfig {
    SacConfig {
        hidden: vec![64, 64],
        ..SacConfig::default()
    }
}

fn spec() -> EnvSpec {
    let arch = ArchDescription::preset("resnet8").unwrap().resolve().unwrap();
    EnvSpec::new(&arch, u64::MAX).unwrap()
}

/// A transition at block `l` with the given action, reward and epoch.
fn transition(spec: &EnvSpec, l: usize, a: f64, r: f64, epoch: usize) -> Transition {
    let kept: Vec<usize> = spec.blocks[..l - 1].iter().map(|b| b.inner).collect();
    let s = build_state(spec, l, &kept, 0.0).unwrap();
    let done = l == spec.num_blocks();
    let s_next = if done {
        s.clone()
    } else {
        let mut k = kept.clone();
        k.push(spec.blocks[l - 1].inner);
        build_state(spec, l + 1, &k, a).unwrap()
    };
    Transition {
        s,
        a,
        r,
        s_next,
        done,
        epoch,
    }
}

fn random_batch<R: Rng>(spec: &EnvSpec, rng: &mut R, n: usize, epochs: usize, reward: impl Fn(f64, usize) -> f64) -> Vec<Transition> {
    (0..n)
        .map(|_| {
            let l = rng.random_range(1..=spec.num_blocks());
            let a = rng.random_range(0.0..0.9);
            let e = rng.random_range(1..=epochs);
            let mut t = transition(spec, l, a, reward(a, e), e);
            t.done = true;
            t
        })
        .collect()
}

fn store_values(s: &ParamStore<f32>) -> Vec<Vec<f32>> {
    s.iter().map(|p| p.value.data().to_vec()).collect()
}

// ---------- environment model ----------

#[test]
fn zero_parameters_give_zero_z_and_zero_prediction() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = EnvModel::<f64>::new(5, small_dyn(), false, &mut rng).unwrap();
    for p in m.store.iter_mut() {
        p.value.fill(0.0);
    }
    for k in 1..=5 {
        assert!(m.env_repr(k).unwrap().z.iter().all(|&v| v == 0.0));
    }
    let sp = spec();
    let batch = vec![transition(&sp, 1, 0.3, 0.0, 2)];
    assert_eq!(m.recon_update(&batch).unwrap(), 0.0);
}

#[test]
fn epoch_index_outside_range_is_an_error() {
    let m = EnvModel::<f32>::new(4, small_dyn(), false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(m.env_repr(0).is_err());
    assert!(m.env_repr(5).is_err());
    assert_eq!(m.env_repr(4).unwrap().z.len(), 16);
}

#[test]
fn z_depends_only_on_past_embeddings() {
    let mut m = EnvModel::<f64>::new(6, small_dyn(), false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let before: Vec<_> = (1..=6).map(|k| m.env_repr(k).unwrap().z).collect();
    let emb = m.emb;
    let row = m.config.emb_dim;
    for v in &mut m.store.value_mut(emb).data_mut()[3 * row..] {
        *v += 1.0;
    }
    for k in 1..=3 {
        assert_eq!(m.env_repr(k).unwrap().z, before[k - 1], "z_{k} changed");
    }
    assert_ne!(m.env_repr(4).unwrap().z, before[3]);
    // Batched rows equal the single-epoch representation.
    let mut g = Graph::new();
    let z = m.z_batch(&mut g, &[5, 2, 5], Bind::Frozen).unwrap();
    let zs = g.value(z);
    assert_eq!(zs.row(1), &m.env_repr(2).unwrap().z[..]);
    assert_eq!(zs.row(0), zs.row(2));
}

#[test]
fn ablated_model_has_zero_z() {
    let m = EnvModel::<f32>::new(3, small_dyn(), true, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert!(m.env_repr(2).unwrap().z.iter().all(|&v| v == 0.0));
    assert!(m.env_repr(4).is_err());
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let cfg = DynamicsConfig {
        emb_dim: 3,
        hidden: 4,
        decoder_hidden: vec![5],
        emb_std: 0.5,
        lr: 1e-3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = EnvModel::<f64>::new(3, cfg, false, &mut rng).unwrap();
    let sp = spec();
    let batch = random_batch(&sp, &mut rng, 6, 3, |a, e| a + e as f64 * 0.1);
    let mut store = m.store.clone();
    let report = gradcheck::check(
        &mut [&mut store],
        GradCheckConfig {
            max_coords: 400,
            ..GradCheckConfig::default()
        },
        |g, stores| m.recon_loss_with(g, stores[0], &batch, Bind::Train),
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn constant_reward_is_fit_within_500_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = EnvModel::<f32>::new(4, DynamicsConfig::default(), false, &mut rng).unwrap();
    let sp = spec();
    let batch = random_batch(&sp, &mut rng, 64, 4, |_, _| 0.7);
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        last = m.recon_update(&batch).unwrap();
        if last < 1e-4 {
            break;
        }
    }
    assert!(last < 1e-4, "final mse {last}");
}

/// Reward alternates with epoch parity; only `z` can tell the epochs apart.
#[test]
fn embeddings_capture_epoch_drift_that_an_ablated_model_cannot() {
    let epochs = 8;
    let reward = |a: f64, e: usize| 0.5 * a + if e.is_multiple_of(2) { 0.25 } else { -0.25 };
    let sp = spec();
    let run = |zero_z: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = EnvModel::<f32>::new(epochs, small_dyn(), zero_z, &mut rng).unwrap();
        for _ in 0..1500 {
            let batch = random_batch(&sp, &mut rng, 64, epochs, reward);
            m.recon_update(&batch).unwrap();
        }
        let eval = random_batch(&sp, &mut ChaCha8Rng::seed_from_u64(99), 512, epochs, reward);
        let mut g = Graph::new();
        let l = m.recon_loss_with(&mut g, &m.store, &eval, Bind::Frozen).unwrap();
        g.scalar_value(l) as f64
    };
    let with_z = run(false);
    let ablated = run(true);
    // Irreducible error without z is the parity variance 0.0625.
    assert!(ablated > 0.05, "ablated {ablated}");
    assert!(with_z < 0.01, "with z {with_z}");
}

#[test]
fn env_model_checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut m = EnvModel::<f32>::new(3, small_dyn(), false, &mut rng).unwrap();
    let sp = spec();
    let batch = random_batch(&sp, &mut rng, 16, 3, |a, _| a);
    m.recon_update(&batch).unwrap();
    let mut ck = Checkpoint::new();
    m.push_to_checkpoint(&mut ck, "env");
    let dir = tempfile::tempdir().unwrap();
    ck.write(dir.path(), "ck").unwrap();
    let ck = Checkpoint::read(dir.path(), "ck").unwrap();
    let mut m2 = EnvModel::<f32>::new(3, small_dyn(), false, &mut ChaCha8Rng::seed_from_u64(70)).unwrap();
    m2.load_from_checkpoint(&ck, "env").unwrap();
    assert_eq!(m.env_repr(3).unwrap(), m2.env_repr(3).unwrap());
    let l1 = m.recon_update(&batch).unwrap();
    let l2 = m2.recon_update(&batch).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(store_values(&m.store), store_values(&m2.store));
}

// ---------- SAC ----------

#[test]
fn zero_actor_deterministic_action_is_the_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut agent = SacAgent::<f32>::new(4, small_sac(), &mut rng).unwrap();
    for p in agent.actor_store.iter_mut() {
        p.value.fill(0.0);
    }
    let s = [0.1; 9];
    let out = agent.act(&s, &[0.0; 4], true, &mut rng).unwrap();
    assert_eq!(out.a, 0.5);
    assert_eq!(squash(0.0), 0.5);
    assert!(agent.act(&s, &[0.0; 3], true, &mut rng).is_err());
}

#[test]
fn log_prob_mean_matches_quadrature_entropy() {
    let (mu, log_std) = (0.3f64, (0.2f64).ln());
    let sigma = log_std.exp();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mc: f64 = (0..n)
        .map(|_| squashed_sample(mu, log_std, StandardNormal.sample(&mut rng)).log_prob)
        .sum::<f64>()
        / n as f64;
    // E[log p(a)] = −H(N(μ, σ²)) − E[log|da/du|], the expectation by Simpson's rule.
    let gauss_entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
    let steps = 20_000;
    let (lo, hi) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let h = (hi - lo) / steps as f64;
    let f = |u: f64| {
        let z = (u - mu) / sigma;
        (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()) * log_det_jacobian(u)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..steps {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let expected = -gauss_entropy - acc * h / 3.0;
    assert!(((mc - expected) / expected).abs() < 0.01, "mc {mc} quadrature {expected}");
}

#[test]
fn sampled_actions_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..1_000_000 {
        let mu = [-30.0, -2.0, 0.0, 3.0, 30.0][i % 5];
        let s = squashed_sample(mu, 2.0, StandardNormal.sample(&mut rng));
        assert!((0.0..1.0).contains(&s.a), "a = {}", s.a);
        assert!(s.log_prob.is_finite() || s.log_prob == f64::INFINITY);
    }
}

#[test]
fn bellman_target_examples() {
    assert!((bellman_target(0.5, false, 0.99, 0.1, 2.0, -1.0) - 2.579).abs() < 1e-12);
    assert_eq!(bellman_target(0.5, true, 0.99, 0.1, 2.0, -1.0), 0.5);
    assert_eq!(bellman_target(0.5, false, 0.0, 0.1, 2.0, -1.0), 0.5);
}

#[test]
fn terminal_zero_reward_critic_loss_is_mean_q_squared() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut env = EnvModel::<f64>::new(3, small_dyn(), false, &mut rng).unwrap();
    let mut agent = SacAgent::<f64>::new(16, small_sac(), &mut rng).unwrap();
    let sp = spec();
    let batch = random_batch(&sp, &mut rng, 8, 3, |_, _| 0.0);
    let mut expect = [0.0; 2];
    for t in &batch {
        let z = env.env_repr(t.epoch).unwrap().z;
        let q = agent.q_values(&t.s.norm, t.a, &z).unwrap();
        expect[0] += q[0] * q[0] / 8.0;
        expect[1] += q[1] * q[1] / 8.0;
    }
    let l = agent.critic_update(&mut env, &batch, false, &mut rng).unwrap();
    assert!((l.q1 - expect[0]).abs() < 1e-10);
    assert!((l.q2 - expect[1]).abs() < 1e-10);
}

#[test]
fn critics_overfit_a_fixed_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut env = EnvModel::<f32>::new(3, small_dyn(), false, &mut rng).unwrap();
    let mut agent = SacAgent::<f32>::new(16, small_sac(), &mut rng).unwrap();
    let sp = spec();
    let batch = random_batch(&sp, &mut rng, 32, 3, |a, e| a * a + 0.1 * e as f64);
    let first = agent.critic_update(&mut env, &batch, false, &mut rng).unwrap();
    let mut last = first;
    for _ in 0..400 {
        last = agent.critic_update(&mut env, &batch, false, &mut rng).unwrap();
    }
    assert!(last.q1 < 1e-2 * first.q1 && last.q2 < 1e-2 * first.q2, "{first:?} -> {last:?}");
}

#[test]
fn updates_touch_only_their_own_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut env = EnvModel::<f32>::new(3, small_dyn(), false, &mut rng).unwrap();
    let mut agent = SacAgent::<f32>::new(16, small_sac(), &mut rng).unwrap();
    let sp = spec();
    let mut batch = random_batch(&sp, &mut rng, 16, 3, |a, _| a);
    batch[0].done = false;
    let env0 = store_values(&env.store);
    let actor0 = store_values(&agent.actor_store);
    let critic0 = store_values(&agent.critic_stores[0]);
    let target0 = store_values(&agent.target_stores[0]);

    agent.critic_update(&mut env, &batch, false, &mut rng).unwrap();
    assert_eq!(store_values(&env.store), env0);
    assert_eq!(store_values(&agent.actor_store), actor0);
    assert_eq!(store_values(&agent.target_stores[0]), target0);
    let critic1 = store_values(&agent.critic_stores[0]);
    assert_ne!(critic1, critic0);

    agent.policy_update(&mut env, &batch, false, &mut rng).unwrap();
    assert_eq!(store_values(&env.store), env0);
    assert_eq!(store_values(&agent.critic_stores[0]), critic1);
    assert_eq!(store_values(&agent.target_stores[0]), target0);
    assert_ne!(store_values(&agent.actor_store), actor0);

    // Joint mode lets the SAC losses move the environment model.
    agent.critic_update(&mut env, &batch, true, &mut rng).unwrap();
    assert_ne!(store_values(&env.store), env0);
}

#[test]
fn polyak_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mk = |tau: f64, rng: &mut ChaCha8Rng| {
        let mut a = SacAgent::<f64>::new(2, SacConfig { tau, ..small_sac() }, rng).unwrap();
        for p in a.target_stores[0].iter_mut() {
            p.value.fill(0.0);
        }
        for p in a.critic_stores[0].iter_mut() {
            p.value.fill(2.0);
        }
        a
    };
    let mut a = mk(0.005, &mut rng);
    a.polyak_update().unwrap();
    for p in a.target_stores[0].iter() {
        assert!(p.value.data().iter().all(|&v| (v - 0.01).abs() < 1e-15));
    }
    let mut a = mk(1.0, &mut rng);
    a.polyak_update().unwrap();
    for p in a.target_stores[0].iter() {
        assert!(p.value.data().iter().all(|&v| v == 2.0));
    }
    let mut a = mk(0.0, &mut rng);
    a.polyak_update().unwrap();
    for p in a.target_stores[0].iter() {
        assert!(p.value.data().iter().all(|&v| v == 0.0));
    }
}

/// Critic trained on `r = −(a − 0.7)²`; with α = 0 the policy mean must
/// move to the preimage of 0.7 under the squash.
#[test]
fn zero_temperature_policy_finds_the_bandit_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = SacConfig {
        alpha: 0.0,
        actor_lr: 1e-3,
        ..small_sac()
    };
    let mut env = EnvModel::<f32>::new(1, small_dyn(), true, &mut rng).unwrap();
    let mut agent = SacAgent::<f32>::new(16, cfg, &mut rng).unwrap();
    let sp = spec();
    let state = transition(&sp, 2, 0.0, 0.0, 1);
    let make = |rng: &mut ChaCha8Rng| {
        (0..128)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..1.0);
                Transition {
                    a,
                    r: -(a - 0.7) * (a - 0.7),
                    done: true,
                    ..state.clone()
                }
            })
            .collect::<Vec<_>>()
    };
    for _ in 0..600 {
        let b = make(&mut rng);
        agent.critic_update(&mut env, &b, false, &mut rng).unwrap();
    }
    let b = make(&mut rng);
    for _ in 0..1500 {
        agent.policy_update(&mut env, &b, false, &mut rng).unwrap();
    }
    let (mu, _) = agent.policy_params(&state.s.norm, &[0.0; 16]).unwrap();
    let target = (2.0f64 * 0.7 - 1.0).atanh();
    assert!((mu - target).abs() < 0.1, "mu {mu} target {target}");
}

/// With a flat critic and a large temperature the policy widens from a
/// narrow start.
#[test]
fn large_temperature_widens_the_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let cfg = SacConfig {
        alpha: 10.0,
        actor_lr: 1e-3,
        ..small_sac()
    };
    let mut env = EnvModel::<f32>::new(1, small_dyn(), true, &mut rng).unwrap();
    let mut agent = SacAgent::<f32>::new(16, cfg, &mut rng).unwrap();
    for i in 0..2 {
        agent.critics[i].zero_output(&mut agent.critic_stores[i]);
    }
    let out = agent.actor.layers.last().unwrap().bias;
    agent.actor_store.value_mut(out).data_mut()[1] = -3.0;
    let sp = spec();
    let batch = vec![transition(&sp, 2, 0.0, 0.0, 1); 64];
    let (_, ls0) = agent.policy_params(&batch[0].s.norm, &[0.0; 16]).unwrap();
    for _ in 0..500 {
        agent.policy_update(&mut env, &batch, false, &mut rng).unwrap();
    }
    let (_, ls1) = agent.policy_params(&batch[0].s.norm, &[0.0; 16]).unwrap();
    assert!(ls1 > ls0 + 2.0, "log std {ls0} -> {ls1}");
}

#[test]
fn agent_checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut env = EnvModel::<f32>::new(3, small_dyn(), false, &mut rng).unwrap();
    let mut agent = SacAgent::<f32>::new(16, small_sac(), &mut rng).unwrap();
    let sp = spec();
    let batch = random_batch(&sp, &mut rng, 16, 3, |a, _| a);
    agent.critic_update(&mut env, &batch, false, &mut rng).unwrap();
    agent.policy_update(&mut env, &batch, false, &mut rng).unwrap();
    agent.polyak_update().unwrap();
    let mut ck = Checkpoint::new();
    agent.push_to_checkpoint(&mut ck, "sac");
    let dir = tempfile::tempdir().unwrap();
    ck.write(dir.path(), "ck").unwrap();
    let ck = Checkpoint::read(dir.path(), "ck").unwrap();
    let mut other = SacAgent::<f32>::new(16, small_sac(), &mut ChaCha8Rng::seed_from_u64(190)).unwrap();
    other.load_from_checkpoint(&ck, "sac").unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let l1 = agent.critic_update(&mut env, &batch, false, &mut r1).unwrap();
    let l2 = other.critic_update(&mut env, &batch, false, &mut r2).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(store_values(&agent.critic_stores[1]), store_values(&other.critic_stores[1]));
}
