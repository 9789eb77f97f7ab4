//! Offline IQL and online TD3 fine-tuning.
//!
//! Networks see scaled quantities only: observations through the fitted
//! observation scaler, actions in `[−1, 1]` through the voltage scaler.
//! Critics take `obs ⊕ action`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::{run_episode, Controller, EpisodeStats};
use crate::dataset::{EpisodeRecord, ReplayBuffer, Scalers, Transition};
use crate::error::{Error, Result};
use crate::nn::{Adam, Head, Mlp};
use crate::plant::PlantParams;
use crate::sim::{Env, EnvConfig, ReferenceTrajectory, ACT_DIM, OBS_DIM};

const CRITIC_IN: usize = OBS_DIM + ACT_DIM;

/// `|τ − 1[u < 0]|·u²`.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    expectile_weight(u, tau) * u * u
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// Hidden-layer widths of every network, shared by IQL and TD3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetShapes {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
}

impl Default for NetShapes {
    fn default() -> Self {
        NetShapes {
            actor_hidden: vec![256, 256],
            critic_hidden: vec![200, 128],
            value_hidden: vec![200, 128],
        }
    }
}

fn with_ends(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
}

impl NetShapes {
    pub fn validate(&self) -> Result<()> {
        for (name, h) in [
            ("actor_hidden", &self.actor_hidden),
            ("critic_hidden", &self.critic_hidden),
            ("value_hidden", &self.value_hidden),
        ] {
            if h.contains(&0) {
                return Err(Error::param(name, "layer widths must be positive"));
            }
        }
        Ok(())
    }

    pub fn actor_sizes(&self) -> Vec<usize> {
        with_ends(OBS_DIM, &self.actor_hidden, ACT_DIM)
    }

    pub fn critic_sizes(&self) -> Vec<usize> {
        with_ends(CRITIC_IN, &self.critic_hidden, 1)
    }

    pub fn value_sizes(&self) -> Vec<usize> {
        with_ends(OBS_DIM, &self.value_hidden, 1)
    }

    pub fn actor<R: Rng + ?Sized>(&self, rng: &mut R) -> Mlp {
        Mlp::new(&self.actor_sizes(), Head::Tanh, rng)
    }

    pub fn critic<R: Rng + ?Sized>(&self, rng: &mut R) -> Mlp {
        Mlp::new(&self.critic_sizes(), Head::Linear, rng)
    }

    pub fn value<R: Rng + ?Sized>(&self, rng: &mut R) -> Mlp {
        Mlp::new(&self.value_sizes(), Head::Linear, rng)
    }
}

/// A scaled minibatch in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub obs: Vec<f64>,
    pub act: Vec<f64>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub terminated: Vec<f64>,
}

impl Batch {
    pub fn from_transitions(ts: &[Transition], scalers: &Scalers) -> Self {
        let n = ts.len();
        let mut b = Batch {
            len: n,
            obs: vec![0.0; n * OBS_DIM],
            act: vec![0.0; n * ACT_DIM],
            reward: Vec::with_capacity(n),
            next_obs: vec![0.0; n * OBS_DIM],
            terminated: Vec::with_capacity(n),
        };
        for (i, t) in ts.iter().enumerate() {
            scalers.obs.transform_into(&t.obs, &mut b.obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
            scalers.obs.transform_into(&t.next_obs, &mut b.next_obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
            scalers.act.transform_into(&t.action, &mut b.act[i * ACT_DIM..(i + 1) * ACT_DIM]);
            b.reward.push(t.reward);
            b.terminated.push(if t.terminated { 1.0 } else { 0.0 });
        }
        b
    }

    pub fn sample<R: Rng + ?Sized>(buffer: &ReplayBuffer, size: usize, scalers: &Scalers, rng: &mut R) -> Result<Self> {
        Ok(Self::from_transitions(&buffer.sample_batch(size, rng)?, scalers))
    }
}

/// Row-wise `[obs | act]`.
fn concat_rows(obs: &[f64], act: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * CRITIC_IN);
    for i in 0..n {
        out.extend_from_slice(&obs[i * OBS_DIM..(i + 1) * OBS_DIM]);
        out.extend_from_slice(&act[i * ACT_DIM..(i + 1) * ACT_DIM]);
    }
    out
}

fn check_finite(what: &'static str, update: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        log::error!("non-finite {what} loss at update {update}");
        Err(Error::NonFiniteLoss { what, update })
    }
}

/// Fit a critic to targets `y` by one Adam step on the mean squared error.
fn regress(net: &mut Mlp, opt: &mut Adam, input: &[f64], y: &[f64]) -> Result<f64> {
    let n = y.len();
    net.zero_grad();
    let q = net.forward_train(input, n)?;
    let mut loss = 0.0;
    let grad: Vec<f64> = q
        .iter()
        .zip(y)
        .map(|(q, y)| {
            let d = q - y;
            loss += d * d;
            2.0 * d / n as f64
        })
        .collect();
    net.backward(&grad)?;
    opt.step_net(net);
    Ok(loss / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IqlConfig {
    pub updates: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub value_lr: f64,
    /// Inverse temperature β of the advantage weights.
    pub beta: f64,
    pub expectile: f64,
    pub gamma: f64,
    /// Soft-update rate of the target critics.
    pub target_rate: f64,
    pub adv_clip: f64,
    pub seed: u64,
    /// Updates between loss-curve rows.
    pub log_every: usize,
    /// Updates between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for IqlConfig {
    fn default() -> Self {
        IqlConfig {
            updates: 1_000_000,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            value_lr: 3e-4,
            beta: 3.0,
            expectile: 0.7,
            gamma: 0.99,
            target_rate: 5e-3,
            adv_clip: 100.0,
            seed: 0,
            log_every: 1000,
            checkpoint_every: 0,
        }
    }
}

impl IqlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return Err(Error::param("expectile", "must lie in (0, 1)"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::param("beta", "must be > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param("gamma", "must lie in (0, 1)"));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::param("target_rate", "must lie in (0, 1]"));
        }
        if !(self.adv_clip > 0.0) {
            return Err(Error::param("adv_clip", "must be > 0"));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("value_lr", self.value_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(name, "must be > 0"));
            }
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::param("batch_size", "batch_size and log_every must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqlNets {
    pub actor: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub value: Mlp,
}

const IQL_FILES: [&str; 6] = ["actor", "q1", "q2", "q1_target", "q2_target", "value"];

impl IqlNets {
    pub fn new<R: Rng + ?Sized>(shapes: &NetShapes, rng: &mut R) -> Self {
        let actor = shapes.actor(rng);
        let q1 = shapes.critic(rng);
        let q2 = shapes.critic(rng);
        let value = shapes.value(rng);
        IqlNets {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            value,
        }
    }

    fn nets(&self) -> [&Mlp; 6] {
        [&self.actor, &self.q1, &self.q2, &self.q1_target, &self.q2_target, &self.value]
    }

    /// One `<name>.ttwn` file per network in `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        for (name, net) in IQL_FILES.iter().zip(self.nets()) {
            net.save(dir.as_ref().join(format!("{name}.ttwn")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let load = |name: &str| Mlp::load(dir.as_ref().join(format!("{name}.ttwn")));
        Ok(IqlNets {
            actor: load("actor")?,
            q1: load("q1")?,
            q2: load("q2")?,
            q1_target: load("q1_target")?,
            q2_target: load("q2_target")?,
            value: load("value")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct IqlOptimizers {
    pub actor: Adam,
    pub q1: Adam,
    pub q2: Adam,
    pub value: Adam,
}

impl IqlOptimizers {
    pub fn new(nets: &IqlNets, cfg: &IqlConfig) -> Self {
        IqlOptimizers {
            actor: Adam::for_net(&nets.actor, cfg.actor_lr),
            q1: Adam::for_net(&nets.q1, cfg.critic_lr),
            q2: Adam::for_net(&nets.q2, cfg.critic_lr),
            value: Adam::for_net(&nets.value, cfg.value_lr),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IqlLosses {
    pub value: f64,
    pub q1: f64,
    pub q2: f64,
    pub actor: f64,
    pub mean_weight: f64,
    pub max_weight: f64,
}

/// Advantage weight `min(exp(β·adv), clip)`.
pub fn advantage_weight(adv: f64, beta: f64, clip: f64) -> f64 {
    (beta * adv).exp().min(clip)
}

/// One IQL step: expectile value regression against the target critics,
/// critic regression onto `r + γ·(1 − terminated)·V(s′)`, advantage-weighted
/// regression of the deterministic actor onto the dataset actions, and a
/// soft update of the target critics.
pub fn iql_update(
    batch: &Batch,
    nets: &mut IqlNets,
    opt: &mut IqlOptimizers,
    cfg: &IqlConfig,
    update: usize,
) -> Result<IqlLosses> {
    let n = batch.len;
    let nf = n as f64;
    let sa = concat_rows(&batch.obs, &batch.act, n);
    let q1t = nets.q1_target.forward(&sa, n)?;
    let q2t = nets.q2_target.forward(&sa, n)?;
    let q_min: Vec<f64> = q1t.iter().zip(&q2t).map(|(a, b)| a.min(*b)).collect();

    nets.value.zero_grad();
    let v = nets.value.forward_train(&batch.obs, n)?;
    let mut value_loss = 0.0;
    let grad: Vec<f64> = q_min
        .iter()
        .zip(&v)
        .map(|(q, v)| {
            let u = q - v;
            value_loss += expectile_loss(u, cfg.expectile);
            -2.0 * expectile_weight(u, cfg.expectile) * u / nf
        })
        .collect();
    let value_loss = check_finite("value", update, value_loss / nf)?;
    nets.value.backward(&grad)?;
    opt.value.step_net(&mut nets.value);

    let v_next = nets.value.forward(&batch.next_obs, n)?;
    let y: Vec<f64> = (0..n)
        .map(|i| batch.reward[i] + cfg.gamma * (1.0 - batch.terminated[i]) * v_next[i])
        .collect();
    let q1_loss = check_finite("q1", update, regress(&mut nets.q1, &mut opt.q1, &sa, &y)?)?;
    let q2_loss = check_finite("q2", update, regress(&mut nets.q2, &mut opt.q2, &sa, &y)?)?;

    let v_now = nets.value.forward(&batch.obs, n)?;
    let weights: Vec<f64> = q_min
        .iter()
        .zip(&v_now)
        .map(|(q, v)| advantage_weight(q - v, cfg.beta, cfg.adv_clip))
        .collect();
    nets.actor.zero_grad();
    let pi = nets.actor.forward_train(&batch.obs, n)?;
    let mut actor_loss = 0.0;
    let mut grad = vec![0.0; n * ACT_DIM];
    for i in 0..n {
        for j in 0..ACT_DIM {
            let d = pi[i * ACT_DIM + j] - batch.act[i * ACT_DIM + j];
            actor_loss += weights[i] * d * d;
            grad[i * ACT_DIM + j] = 2.0 * weights[i] * d / nf;
        }
    }
    let actor_loss = check_finite("actor", update, actor_loss / nf)?;
    nets.actor.backward(&grad)?;
    opt.actor.step_net(&mut nets.actor);

    nets.q1_target.soft_update_from(&nets.q1, cfg.target_rate);
    nets.q2_target.soft_update_from(&nets.q2, cfg.target_rate);

    Ok(IqlLosses {
        value: value_loss,
        q1: q1_loss,
        q2: q2_loss,
        actor: actor_loss,
        mean_weight: weights.iter().sum::<f64>() / nf,
        max_weight: weights.iter().cloned().fold(0.0, f64::max),
    })
}

/// Loss-curve row: losses averaged over the preceding `log_every` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IqlLogRow {
    pub update: usize,
    pub value_loss: f64,
    pub q_loss: f64,
    pub actor_loss: f64,
    pub mean_weight: f64,
}

/// Run `cfg.updates` IQL updates on uniformly sampled minibatches.
/// `checkpoint` is called every `checkpoint_every` updates and once at the end.
pub fn iql_train<F>(
    buffer: &ReplayBuffer,
    scalers: &Scalers,
    shapes: &NetShapes,
    cfg: &IqlConfig,
    mut checkpoint: F,
) -> Result<(IqlNets, Vec<IqlLogRow>)>
where
    F: FnMut(usize, &IqlNets) -> Result<()>,
{
    cfg.validate()?;
    shapes.validate()?;
    if buffer.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets = IqlNets::new(shapes, &mut rng);
    let mut opt = IqlOptimizers::new(&nets, cfg);
    let mut curve = Vec::new();
    let mut acc = IqlLosses::default();
    let mut acc_n = 0usize;
    for u in 1..=cfg.updates {
        let batch = Batch::sample(buffer, cfg.batch_size, scalers, &mut rng)?;
        let l = iql_update(&batch, &mut nets, &mut opt, cfg, u)?;
        acc.value += l.value;
        acc.q1 += 0.5 * (l.q1 + l.q2);
        acc.actor += l.actor;
        acc.mean_weight += l.mean_weight;
        acc_n += 1;
        if u % cfg.log_every == 0 || u == cfg.updates {
            let k = acc_n as f64;
            let row = IqlLogRow {
                update: u,
                value_loss: acc.value / k,
                q_loss: acc.q1 / k,
                actor_loss: acc.actor / k,
                mean_weight: acc.mean_weight / k,
            };
            log::info!(
                "iql {u}: value {:.3e} q {:.3e} actor {:.3e} weight {:.3}",
                row.value_loss,
                row.q_loss,
                row.actor_loss,
                row.mean_weight
            );
            curve.push(row);
            acc = IqlLosses::default();
            acc_n = 0;
        }
        if (cfg.checkpoint_every > 0 && u % cfg.checkpoint_every == 0) || u == cfg.updates {
            checkpoint(u, &nets)?;
        }
    }
    Ok((nets, curve))
}

/// `y = r + γ·(1 − done)·min(q1, q2)`.
pub fn td3_target(reward: f64, gamma: f64, terminated: bool, q1: f64, q2: f64) -> f64 {
    if terminated {
        reward
    } else {
        reward + gamma * q1.min(q2)
    }
}

/// Gaussian target-smoothing noise clipped to `±clip`.
pub fn clipped_noise<R: Rng + ?Sized>(rng: &mut R, sigma: f64, clip: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let n: f64 = Normal::new(0.0, sigma).expect("sigma is finite").sample(rng);
    n.clamp(-clip, clip)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    pub steps: usize,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub explore_noise: f64,
    pub policy_delay: usize,
    pub gamma: f64,
    pub target_rate: f64,
    /// Environment steps before the first update.
    pub warmup: usize,
    /// Critic updates before the first actor update.
    pub actor_warmup: usize,
    /// Anchor the actor to buffer actions: the loss becomes
    /// `−λ·mean Q1(s, π(s)) + mean (π(s) − a)²` with `λ = bc_alpha / mean |Q1|`.
    pub bc_regularize: bool,
    pub bc_alpha: f64,
    pub buffer_capacity: usize,
    pub prefill_offline: bool,
    /// Environment steps between greedy evaluations.
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// First trajectory seed of the evaluation set.
    pub eval_seed: u64,
    pub seed: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            steps: 200_000,
            batch_size: 1024,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            policy_noise: 0.2,
            noise_clip: 0.5,
            explore_noise: 0.1,
            policy_delay: 2,
            gamma: 0.99,
            target_rate: 5e-3,
            warmup: 1000,
            actor_warmup: 5000,
            bc_regularize: true,
            bc_alpha: 2.5,
            buffer_capacity: 1_000_000,
            prefill_offline: true,
            eval_every: 1000,
            eval_episodes: 5,
            eval_seed: 2_000_000,
            seed: 0,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("policy_noise", self.policy_noise),
            ("noise_clip", self.noise_clip),
            ("explore_noise", self.explore_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::param(name, "must be >= 0"));
            }
        }
        if !(self.bc_alpha > 0.0 && self.bc_alpha.is_finite()) {
            return Err(Error::param("bc_alpha", "must be > 0"));
        }
        if self.policy_delay == 0 {
            return Err(Error::param("policy_delay", "must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::param("gamma", "must lie in (0, 1)"));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::param("target_rate", "must lie in (0, 1]"));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(name, "must be > 0"));
            }
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.eval_every == 0 {
            return Err(Error::param("batch_size", "batch_size, buffer_capacity and eval_every must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    critic_updates: usize,
    actor_updates: usize,
}

impl Td3Agent {
    pub fn new(actor: Mlp, q1: Mlp, q2: Mlp, cfg: &Td3Config) -> Self {
        Td3Agent {
            actor_opt: Adam::for_net(&actor, cfg.actor_lr),
            q1_opt: Adam::for_net(&q1, cfg.critic_lr),
            q2_opt: Adam::for_net(&q2, cfg.critic_lr),
            actor_target: actor.clone(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            critic_updates: 0,
            actor_updates: 0,
        }
    }

    pub fn critic_updates(&self) -> usize {
        self.critic_updates
    }

    pub fn actor_updates(&self) -> usize {
        self.actor_updates
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub critics_reused: bool,
}

/// Initialize TD3 from IQL: the actor is copied exactly, the critics are
/// reused when their shapes match the TD3 shapes and freshly initialized
/// otherwise, and every target starts equal to its online network.
pub fn transfer_weights<R: Rng + ?Sized>(
    iql: &IqlNets,
    shapes: &NetShapes,
    cfg: &Td3Config,
    rng: &mut R,
) -> Result<(Td3Agent, TransferReport)> {
    let actor_sizes = shapes.actor_sizes();
    if iql.actor.sizes() != actor_sizes.as_slice() || iql.actor.head() != Head::Tanh {
        return Err(Error::DimensionMismatch {
            expected: crate::nn::count_params(&actor_sizes),
            got: iql.actor.param_count(),
        });
    }
    let critic_sizes = shapes.critic_sizes();
    let reuse = iql.q1.sizes() == critic_sizes.as_slice() && iql.q2.sizes() == critic_sizes.as_slice();
    let (q1, q2) = if reuse {
        (iql.q1.clone(), iql.q2.clone())
    } else {
        log::warn!("IQL critic shape differs from the TD3 critic shape; critics start fresh");
        (shapes.critic(rng), shapes.critic(rng))
    };
    Ok((
        Td3Agent::new(iql.actor.clone(), q1, q2, cfg),
        TransferReport { critics_reused: reuse },
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Td3Losses {
    pub q1: f64,
    pub q2: f64,
    /// Actor loss, present on delayed actor updates.
    pub actor: Option<f64>,
}

/// One TD3 critic update, plus a delayed actor update and target soft update
/// every `policy_delay` critic updates.
pub fn td3_update<R: Rng + ?Sized>(
    batch: &Batch,
    agent: &mut Td3Agent,
    cfg: &Td3Config,
    rng: &mut R,
) -> Result<Td3Losses> {
    let n = batch.len;
    let update = agent.critic_updates + 1;
    let mut next_act = agent.actor_target.forward(&batch.next_obs, n)?;
    for a in next_act.iter_mut() {
        *a = (*a + clipped_noise(rng, cfg.policy_noise, cfg.noise_clip)).clamp(-1.0, 1.0);
    }
    let next_sa = concat_rows(&batch.next_obs, &next_act, n);
    let q1t = agent.q1_target.forward(&next_sa, n)?;
    let q2t = agent.q2_target.forward(&next_sa, n)?;
    let y: Vec<f64> = (0..n)
        .map(|i| td3_target(batch.reward[i], cfg.gamma, batch.terminated[i] > 0.5, q1t[i], q2t[i]))
        .collect();
    let sa = concat_rows(&batch.obs, &batch.act, n);
    let q1 = check_finite("q1", update, regress(&mut agent.q1, &mut agent.q1_opt, &sa, &y)?)?;
    let q2 = check_finite("q2", update, regress(&mut agent.q2, &mut agent.q2_opt, &sa, &y)?)?;
    agent.critic_updates = update;

    let mut actor_loss = None;
    if update % cfg.policy_delay == 0 && update > cfg.actor_warmup {
        agent.actor.zero_grad();
        let pi = agent.actor.forward_train(&batch.obs, n)?;
        let pi_sa = concat_rows(&batch.obs, &pi, n);
        agent.q1.zero_grad();
        let q = agent.q1.forward_train(&pi_sa, n)?;
        let nf = n as f64;
        let mean_q = q.iter().sum::<f64>() / nf;
        let lambda = if cfg.bc_regularize {
            cfg.bc_alpha / (q.iter().map(|v| v.abs()).sum::<f64>() / nf).max(1e-12)
        } else {
            1.0
        };
        let mut loss = -lambda * mean_q;
        let d_input = agent.q1.backward(&vec![-lambda / nf; n])?;
        agent.q1.zero_grad();
        let mut d_pi = Vec::with_capacity(n * ACT_DIM);
        for row in d_input.chunks_exact(CRITIC_IN) {
            d_pi.extend_from_slice(&row[OBS_DIM..]);
        }
        if cfg.bc_regularize {
            let m = (n * ACT_DIM) as f64;
            for ((g, p), a) in d_pi.iter_mut().zip(&pi).zip(&batch.act) {
                loss += (p - a) * (p - a) / m;
                *g += 2.0 * (p - a) / m;
            }
        }
        let loss = check_finite("actor", update, loss)?;
        agent.actor.backward(&d_pi)?;
        agent.actor_opt.step_net(&mut agent.actor);
        agent.actor_updates += 1;
        agent.actor_target.soft_update_from(&agent.actor, cfg.target_rate);
        actor_loss = Some(loss);
    }
    if update % cfg.policy_delay == 0 {
        agent.q1_target.soft_update_from(&agent.q1, cfg.target_rate);
        agent.q2_target.soft_update_from(&agent.q2, cfg.target_rate);
    }
    Ok(Td3Losses { q1, q2, actor: actor_loss })
}

/// Deterministic policy: scaled observation → actor → volts.
#[derive(Debug, Clone)]
pub struct PolicyController {
    pub actor: Mlp,
    pub scalers: Scalers,
}

impl PolicyController {
    pub fn new(actor: Mlp, scalers: Scalers) -> Result<Self> {
        if actor.input_dim() != OBS_DIM || actor.output_dim() != ACT_DIM {
            return Err(Error::DimensionMismatch {
                expected: OBS_DIM,
                got: actor.input_dim(),
            });
        }
        Ok(PolicyController { actor, scalers })
    }

    /// Action in scaled units, each component in `[−1, 1]`.
    pub fn scaled_action(&self, obs: &[f64; OBS_DIM]) -> Result<Vec<f64>> {
        let mut x = [0.0; OBS_DIM];
        self.scalers.obs.transform_into(obs, &mut x);
        self.actor.predict(&x)
    }

    pub fn volts(&self, obs: &[f64; OBS_DIM]) -> Result<[f64; ACT_DIM]> {
        let v = self.scalers.act.inverse(&self.scaled_action(obs)?);
        Ok([v[0], v[1]])
    }
}

impl Controller for PolicyController {
    fn act(&mut self, env: &Env) -> Result<[f64; 2]> {
        self.volts(&env.observe().to_array())
    }
}

/// One greedy episode per trajectory seed on a fresh environment.
pub fn evaluate<C: Controller + ?Sized>(
    params: &PlantParams,
    env_cfg: &EnvConfig,
    controller: &mut C,
    seeds: &[u64],
) -> Result<Vec<(ReferenceTrajectory, EpisodeStats)>> {
    let mut env = Env::new(params, env_cfg.clone())?;
    seeds
        .iter()
        .map(|&s| {
            let traj = ReferenceTrajectory::sample(s);
            run_episode(&mut env, controller, traj, |_, _, _| {}).map(|st| (traj, st))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Td3EvalRow {
    pub step: usize,
    pub critic_updates: usize,
    pub mean_return: f64,
    pub mean_force_err: f64,
    pub max_force_err: f64,
    pub terminations: usize,
}

fn eval_row(step: usize, agent: &Td3Agent, stats: &[(ReferenceTrajectory, EpisodeStats)]) -> Td3EvalRow {
    let k = stats.len().max(1) as f64;
    Td3EvalRow {
        step,
        critic_updates: agent.critic_updates,
        mean_return: stats.iter().map(|(_, s)| s.episode_return).sum::<f64>() / k,
        mean_force_err: stats.iter().map(|(_, s)| s.mean_abs_force_err()).sum::<f64>() / k,
        max_force_err: stats.iter().map(|(_, s)| s.max_abs_force_err).fold(0.0, f64::max),
        terminations: stats.iter().filter(|(_, s)| s.terminated).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Td3LogRow {
    pub step: usize,
    pub critic_updates: usize,
    pub actor_updates: usize,
    pub q_loss: f64,
    pub actor_loss: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct Td3Outcome {
    pub agent: Td3Agent,
    pub evals: Vec<Td3EvalRow>,
    pub log: Vec<Td3LogRow>,
}

/// Online fine-tuning. Each training episode runs on a freshly sampled
/// trajectory; exploration noise is added in scaled action units. Greedy
/// evaluations on `eval_episodes` fixed trajectories run before the first
/// step and every `eval_every` steps. A simulation error ends the episode.
pub fn td3_finetune(
    params: &PlantParams,
    env_cfg: &EnvConfig,
    mut agent: Td3Agent,
    scalers: &Scalers,
    offline: Option<&[EpisodeRecord]>,
    cfg: &Td3Config,
) -> Result<Td3Outcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traj_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    traj_rng.set_stream(1);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    if cfg.prefill_offline {
        for t in offline.unwrap_or(&[]).iter().flat_map(|e| &e.transitions) {
            buffer.push(*t);
        }
    }
    let eval_seeds: Vec<u64> = (0..cfg.eval_episodes as u64).map(|k| cfg.eval_seed + k).collect();
    let evaluate_now = |agent: &Td3Agent, step: usize| -> Result<Td3EvalRow> {
        let mut policy = PolicyController::new(agent.actor.clone(), scalers.clone())?;
        let stats = evaluate(params, env_cfg, &mut policy, &eval_seeds)?;
        let row = eval_row(step, agent, &stats);
        log::info!(
            "td3 step {step}: eval return {:.4} force err {:.4} N terminations {}",
            row.mean_return,
            row.mean_force_err,
            row.terminations
        );
        Ok(row)
    };

    let explore = (cfg.explore_noise > 0.0).then(|| Normal::new(0.0, cfg.explore_noise).expect("finite sigma"));
    let mut env = Env::new(params, env_cfg.clone())?;
    let mut evals = vec![evaluate_now(&agent, 0)?];
    let mut log_rows = Vec::new();
    let (mut q_acc, mut a_acc, mut a_n, mut n_acc) = (0.0, 0.0, 0usize, 0usize);
    let mut episodes = 0usize;
    let mut obs = env.reset(traj_rng.random()).0.to_array();
    episodes += 1;

    for step in 1..=cfg.steps {
        let mut scaled_obs = [0.0; OBS_DIM];
        scalers.obs.transform_into(&obs, &mut scaled_obs);
        let mut a = agent.actor.predict(&scaled_obs)?;
        if let Some(noise) = &explore {
            for v in a.iter_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
            }
        }
        let volts = scalers.act.inverse(&a);
        match env.step([volts[0], volts[1]]) {
            Ok(out) => {
                let next = out.obs.to_array();
                buffer.push(Transition {
                    obs,
                    action: out.applied,
                    reward: out.reward,
                    next_obs: next,
                    terminated: out.terminated,
                    truncated: out.truncated && !out.terminated,
                });
                obs = next;
            }
            Err(e) if e.is_numerical() => {
                log::warn!("td3 step {step}: episode aborted: {e}");
            }
            Err(e) => return Err(e),
        }
        if env.is_done() {
            obs = env.reset(traj_rng.random()).0.to_array();
            episodes += 1;
        }

        if step > cfg.warmup && !buffer.is_empty() {
            let batch = Batch::sample(&buffer, cfg.batch_size, scalers, &mut rng)?;
            let l = td3_update(&batch, &mut agent, cfg, &mut rng)?;
            q_acc += 0.5 * (l.q1 + l.q2);
            n_acc += 1;
            if let Some(al) = l.actor {
                a_acc += al;
                a_n += 1;
            }
        }

        if step % cfg.eval_every == 0 || step == cfg.steps {
            log_rows.push(Td3LogRow {
                step,
                critic_updates: agent.critic_updates,
                actor_updates: agent.actor_updates,
                q_loss: if n_acc > 0 { q_acc / n_acc as f64 } else { f64::NAN },
                actor_loss: if a_n > 0 { a_acc / a_n as f64 } else { f64::NAN },
                episodes,
            });
            (q_acc, a_acc, a_n, n_acc) = (0.0, 0.0, 0, 0);
            evals.push(evaluate_now(&agent, step)?);
        }
    }
    Ok(Td3Outcome {
        agent,
        evals,
        log: log_rows,
    })
}
