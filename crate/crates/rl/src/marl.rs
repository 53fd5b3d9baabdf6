//! Recurrent multi-agent PPO with a shared actor and a centralized critic.
//!
//! Training alternates between collecting `B` episodes with the stochastic
//! actor and several epochs of clipped policy updates over fixed-length chunks
//! of those episodes. The critic sees the global state plus the agent's
//! one-hot id and regresses PopArt-normalized returns; actors only ever see
//! their local observation.

use std::collections::BTreeMap;
use std::path::Path;

use mec_core::env::{global_state_dim, observation_dim, CostBreakdown};
use mec_core::{rng_stream, Action, ActionMask, AgentObservation, Config, MecEnv, Policy, Stream};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RlError};
use crate::neural::{
    adam_step, argmax_masked, entropy, entropy_grad, from_named_views, log_prob_grad, masked_log_softmax,
    named_views, sample_categorical, AdamConfig, AdamState, NetShape, PopArt, RecurrentNet,
};

/// Result of one joint step.
#[derive(Debug, Clone)]
pub struct EnvStep {
    pub observations: Vec<AgentObservation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Costs of tasks resolved during the step, tagged with the owning agent.
    pub costs: Vec<(usize, CostBreakdown)>,
}

/// What the trainer needs from an environment.
pub trait MultiAgentEnv {
    fn num_agents(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn state_dim(&self) -> usize;
    fn num_targets(&self) -> usize;
    fn num_modes(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<AgentObservation>;
    fn global_state(&self) -> Vec<f64>;
    fn step(&mut self, actions: &[Option<Action>]) -> EnvStep;

    /// Number of global-state reads so far, for checking decentralized execution.
    fn global_state_reads(&self) -> usize {
        0
    }
}

impl MultiAgentEnv for MecEnv {
    fn num_agents(&self) -> usize {
        MecEnv::num_agents(self)
    }

    fn obs_dim(&self) -> usize {
        observation_dim(self.config())
    }

    fn state_dim(&self) -> usize {
        global_state_dim(self.config())
    }

    fn num_targets(&self) -> usize {
        self.num_devices()
    }

    fn num_modes(&self) -> usize {
        self.config().num_modes()
    }

    fn reset(&mut self, seed: u64) -> Vec<AgentObservation> {
        MecEnv::reset(self, seed)
    }

    fn global_state(&self) -> Vec<f64> {
        MecEnv::global_state(self)
    }

    fn step(&mut self, actions: &[Option<Action>]) -> EnvStep {
        let r = MecEnv::step(self, actions);
        EnvStep {
            costs: r.resolved.iter().map(|t| (t.agent(), t.cost)).collect(),
            observations: r.observations,
            rewards: r.rewards,
            done: r.done,
        }
    }

    fn global_state_reads(&self) -> usize {
        MecEnv::global_state_reads(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Budget in environment steps (slots).
    pub step_max: u64,
    /// Overrides the environment's episode length when set.
    pub episode_len: Option<usize>,
    /// Episodes per update (`B`).
    pub batch_episodes: usize,
    /// Mini-batches per epoch (`K`).
    pub minibatches: usize,
    /// Chunk length for truncated BPTT (`L`).
    pub chunk_len: usize,
    pub epochs: usize,
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    /// Anneal the learning rate linearly to zero over the budget.
    pub lr_decay: bool,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub popart_beta: f64,
    /// Greedy evaluation every this many updates (and after the last one).
    pub eval_every: u64,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step_max: 200_000,
            episode_len: None,
            batch_episodes: 8,
            minibatches: 4,
            chunk_len: 10,
            epochs: 4,
            discount: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 1.0,
            lr: 3e-4,
            lr_decay: true,
            adam_eps: 1e-5,
            max_grad_norm: 10.0,
            hidden: 64,
            popart_beta: 1e-3,
            eval_every: 10,
            eval_episodes: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, msg: &str| {
            Err(RlError::Config {
                field,
                msg: msg.to_string(),
            })
        };
        if self.batch_episodes == 0 {
            return bad("batch_episodes", "must be at least 1");
        }
        if self.minibatches == 0 {
            return bad("minibatches", "must be at least 1");
        }
        if self.chunk_len == 0 {
            return bad("chunk_len", "must be at least 1");
        }
        if self.episode_len == Some(0) {
            return bad("episode_len", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad("discount", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda", "must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip", "must be positive");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm", "must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1");
        }
        if !(self.popart_beta > 0.0 && self.popart_beta <= 1.0) {
            return bad("popart_beta", "must lie in (0, 1]");
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1");
        }
        if !(self.entropy_coef >= 0.0) || !(self.value_coef >= 0.0) {
            return bad("entropy_coef", "loss coefficients must be non-negative");
        }
        Ok(())
    }

    /// TOML (or JSON when the text starts with `{`).
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| RlError::Parse(format!("train config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| RlError::Parse(format!("train config: {}", e.message())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies the episode-length override to an environment config.
    pub fn apply_to(&self, cfg: &mut Config) {
        if let Some(t) = self.episode_len {
            cfg.sim.episode_slots = t;
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            eps: self.adam_eps,
            ..AdamConfig::default()
        }
    }
}

/// Environment dimensions a checkpoint is tied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub num_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub num_targets: usize,
    pub num_modes: usize,
}

impl Dims {
    pub fn of<E: MultiAgentEnv + ?Sized>(env: &E) -> Self {
        Self {
            num_agents: env.num_agents(),
            obs_dim: env.obs_dim(),
            state_dim: env.state_dim(),
            num_targets: env.num_targets(),
            num_modes: env.num_modes(),
        }
    }

    pub fn critic_input(&self) -> usize {
        self.state_dim + self.num_agents
    }
}

/// Actor, critic, their optimizers, and the value normalizer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub dims: Dims,
    pub actor_net: RecurrentNet,
    pub critic_net: RecurrentNet,
    pub actor: Vec<f64>,
    pub critic: Vec<f64>,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub popart: PopArt,
}

fn nets(dims: &Dims, hidden: usize) -> (RecurrentNet, RecurrentNet) {
    let actor = RecurrentNet::new(NetShape {
        input: dims.obs_dim,
        hidden,
        heads: vec![dims.num_targets, dims.num_modes],
    });
    let critic = RecurrentNet::new(NetShape {
        input: dims.critic_input(),
        hidden,
        heads: vec![1],
    });
    (actor, critic)
}

impl Learner {
    pub fn new(dims: Dims, cfg: &TrainConfig) -> Self {
        let (actor_net, critic_net) = nets(&dims, cfg.hidden);
        let actor = actor_net.init(&mut rng_stream(cfg.seed, "init/actor"), 0.01);
        let critic = critic_net.init(&mut rng_stream(cfg.seed, "init/critic"), 1.0);
        Self {
            dims,
            actor_adam: AdamState::new(actor.len()),
            critic_adam: AdamState::new(critic.len()),
            actor_net,
            critic_net,
            actor,
            critic,
            popart: PopArt::new(cfg.popart_beta),
        }
    }

    pub fn hidden(&self) -> usize {
        self.actor_net.shape.hidden
    }

    /// Greedy (or sampling) decentralized controller built from the actor.
    pub fn policy(&self, greedy: bool) -> ActorPolicy {
        ActorPolicy::new(self.actor_net.clone(), self.actor.clone(), self.dims.num_agents, greedy)
    }
}

fn critic_input(state: &[f64], agent: usize, num_agents: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() + num_agents);
    v.extend_from_slice(state);
    v.extend((0..num_agents).map(|i| if i == agent { 1.0 } else { 0.0 }));
    v
}

/// Deterministic per-episode seed derived from a base seed.
pub fn episode_seed(base: u64, label: &str, index: u64) -> u64 {
    rng_stream(base, &format!("{label}/{index}")).next_u64()
}

/// One recurrent-actor decision.
fn act(
    net: &RecurrentNet,
    params: &[f64],
    obs: &AgentObservation,
    hidden: &mut Vec<f64>,
    greedy: bool,
    rng: &mut Stream,
) -> Option<(Action, f64)> {
    let (out, h) = net.step(params, &obs.values, hidden);
    *hidden = h;
    if !obs.mask.has_task {
        return None;
    }
    let lp_t = masked_log_softmax(&out[0], Some(&obs.mask.targets));
    let lp_m = masked_log_softmax(&out[1], None);
    let (target, mode) = if greedy {
        (argmax_masked(&out[0], Some(&obs.mask.targets)), argmax_masked(&out[1], None))
    } else {
        (sample_categorical(&lp_t, rng), sample_categorical(&lp_m, rng))
    };
    Some((Action { target, mode }, lp_t[target] + lp_m[mode]))
}

/// Decentralized controller: each agent runs the shared actor on its own
/// observation with its own hidden state.
#[derive(Debug, Clone)]
pub struct ActorPolicy {
    net: RecurrentNet,
    params: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    greedy: bool,
}

impl ActorPolicy {
    pub fn new(net: RecurrentNet, params: Vec<f64>, num_agents: usize, greedy: bool) -> Self {
        let h = net.shape.hidden;
        Self {
            net,
            params,
            hidden: vec![vec![0.0; h]; num_agents],
            greedy,
        }
    }
}

impl Policy for ActorPolicy {
    fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v = 0.0));
    }

    fn choose(&mut self, obs: &AgentObservation, rng: &mut Stream) -> Option<Action> {
        act(&self.net, &self.params, obs, &mut self.hidden[obs.agent], self.greedy, rng).map(|(a, _)| a)
    }

    fn name(&self) -> String {
        "rmappo".into()
    }
}

/// `L` consecutive steps of one agent, with hidden states at the head only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chunk {
    pub agent: usize,
    pub h_pi: Vec<f64>,
    pub h_v: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
    pub critic_in: Vec<Vec<f64>>,
    pub target_mask: Vec<Vec<bool>>,
    /// Whether the agent held a task (and so acted) at the step.
    pub active: Vec<bool>,
    pub targets: Vec<usize>,
    pub modes: Vec<usize>,
    pub log_probs: Vec<f64>,
    /// Critic estimates in raw return units.
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Data buffer of one collection phase.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub chunks: Vec<Chunk>,
    pub env_steps: u64,
    pub episodes: usize,
}

impl RolloutBuffer {
    pub fn returns(&self) -> Vec<f64> {
        self.chunks.iter().flat_map(|c| c.returns.iter().copied()).collect()
    }
}

/// Generalized advantage estimates and returns for one trajectory.
///
/// `dones[t]` marks a terminal transition after step `t`; `next_value` is the
/// bootstrap value after the last step. Values are in raw return units.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    next_value: f64,
    discount: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(RlError::Shape(format!(
            "gae inputs: {} rewards, {} values, {} done flags",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let (next, cont) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (next_value, 1.0)
        };
        let delta = rewards[t] + discount * next * cont - values[t];
        acc = delta + discount * lambda * cont * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Per-agent trajectory of one episode before chunking.
#[derive(Default)]
struct Stream1 {
    h_pi: Vec<Vec<f64>>,
    h_v: Vec<Vec<f64>>,
    obs: Vec<Vec<f64>>,
    critic_in: Vec<Vec<f64>>,
    target_mask: Vec<Vec<bool>>,
    active: Vec<bool>,
    targets: Vec<usize>,
    modes: Vec<usize>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
}

/// Collects `B` episodes with the current actor. With `greedy` the actor takes
/// argmax actions (used for determinism checks); training samples.
pub fn collect_rollouts<E: MultiAgentEnv + ?Sized>(
    env: &mut E,
    learner: &Learner,
    cfg: &TrainConfig,
    iteration: u64,
    greedy: bool,
) -> Result<RolloutBuffer> {
    let dims = Dims::of(env);
    if dims != learner.dims {
        return Err(RlError::Shape(format!(
            "environment {:?} does not match learner {:?}",
            dims, learner.dims
        )));
    }
    let m = dims.num_agents;
    let hs = learner.hidden();
    let mut rng = rng_stream(cfg.seed, &format!("rollout/{iteration}"));
    let mut buffer = RolloutBuffer::default();
    for b in 0..cfg.batch_episodes {
        let seed = episode_seed(cfg.seed, "train", iteration * cfg.batch_episodes as u64 + b as u64);
        let mut obs = env.reset(seed);
        let mut h_pi = vec![vec![0.0; hs]; m];
        let mut h_v = vec![vec![0.0; hs]; m];
        let mut streams: Vec<Stream1> = (0..m).map(|_| Stream1::default()).collect();
        loop {
            let state = env.global_state();
            let mut actions = Vec::with_capacity(m);
            for (i, s) in streams.iter_mut().enumerate() {
                let o = &obs[i];
                s.h_pi.push(h_pi[i].clone());
                s.h_v.push(h_v[i].clone());
                let cin = critic_input(&state, i, m);
                let (vout, hv) = learner.critic_net.step(&learner.critic, &cin, &h_v[i]);
                h_v[i] = hv;
                s.values.push(learner.popart.denormalize(vout[0][0]));
                let decision = act(&learner.actor_net, &learner.actor, o, &mut h_pi[i], greedy, &mut rng);
                s.obs.push(o.values.clone());
                s.critic_in.push(cin);
                s.target_mask.push(o.mask.targets.clone());
                s.active.push(decision.is_some());
                let (a, lp) = decision.unwrap_or((Action { target: i, mode: 0 }, 0.0));
                s.targets.push(a.target);
                s.modes.push(a.mode);
                s.log_probs.push(lp);
                actions.push(decision.map(|(a, _)| a));
            }
            let step = env.step(&actions);
            buffer.env_steps += 1;
            for (s, r) in streams.iter_mut().zip(&step.rewards) {
                s.rewards.push(*r);
                s.dones.push(step.done);
            }
            obs = step.observations;
            if step.done {
                break;
            }
        }
        buffer.episodes += 1;
        for (agent, s) in streams.into_iter().enumerate() {
            let (adv, ret) = compute_gae(&s.rewards, &s.values, &s.dones, 0.0, cfg.discount, cfg.gae_lambda)?;
            let n = s.obs.len();
            let mut start = 0;
            while start < n {
                let end = (start + cfg.chunk_len).min(n);
                let r = start..end;
                buffer.chunks.push(Chunk {
                    agent,
                    h_pi: s.h_pi[start].clone(),
                    h_v: s.h_v[start].clone(),
                    obs: s.obs[r.clone()].to_vec(),
                    critic_in: s.critic_in[r.clone()].to_vec(),
                    target_mask: s.target_mask[r.clone()].to_vec(),
                    active: s.active[r.clone()].to_vec(),
                    targets: s.targets[r.clone()].to_vec(),
                    modes: s.modes[r.clone()].to_vec(),
                    log_probs: s.log_probs[r.clone()].to_vec(),
                    values: s.values[r.clone()].to_vec(),
                    rewards: s.rewards[r.clone()].to_vec(),
                    dones: s.dones[r.clone()].to_vec(),
                    advantages: adv[r.clone()].to_vec(),
                    returns: ret[r].to_vec(),
                });
                start = end;
            }
        }
    }
    Ok(buffer)
}

/// The clipped surrogate `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
    /// Largest `|rho - 1|` on the first mini-batch, before any parameter change.
    pub initial_ratio_dev: f64,
    pub minibatches: usize,
}

fn clip_grad(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Loss terms of one chunk (already scaled by the mini-batch weights).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChunkLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clipped: usize,
    pub max_ratio_dev: f64,
}

impl ChunkLoss {
    /// The scalar being minimized.
    pub fn total(&self, cfg: &TrainConfig) -> f64 {
        self.policy - cfg.entropy_coef * self.entropy + cfg.value_coef * self.value
    }
}

/// Losses of one chunk under the current parameters; their gradients are
/// accumulated into `g_actor` and `g_critic`. `adv` holds the normalized
/// advantages; actor terms are weighted by `actor_scale` per acting step and
/// critic terms by `critic_scale` per step.
#[allow(clippy::too_many_arguments)]
pub fn chunk_gradients(
    learner: &Learner,
    c: &Chunk,
    adv: &[f64],
    cfg: &TrainConfig,
    actor_scale: f64,
    critic_scale: f64,
    g_actor: &mut [f64],
    g_critic: &mut [f64],
) -> ChunkLoss {
    let mut out = ChunkLoss::default();
    let obs: Vec<&[f64]> = c.obs.iter().map(|v| v.as_slice()).collect();
    let fwd = learner.actor_net.forward_seq(&learner.actor, &obs, &c.h_pi);
    let mut d_out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(c.len());
    for t in 0..c.len() {
        let mut dt = vec![0.0; learner.dims.num_targets];
        let mut dm = vec![0.0; learner.dims.num_modes];
        if c.active[t] {
            let lp_t = masked_log_softmax(&fwd.outputs[t][0], Some(&c.target_mask[t]));
            let lp_m = masked_log_softmax(&fwd.outputs[t][1], None);
            let logp = lp_t[c.targets[t]] + lp_m[c.modes[t]];
            let ratio = (logp - c.log_probs[t]).exp();
            let a = adv[t];
            let surr1 = ratio * a;
            let surr2 = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
            let ent = entropy(&lp_t) + entropy(&lp_m);
            out.policy -= surr1.min(surr2) * actor_scale;
            out.entropy += ent * actor_scale;
            out.kl += (c.log_probs[t] - logp) * actor_scale;
            out.max_ratio_dev = out.max_ratio_dev.max((ratio - 1.0).abs());
            if (ratio - 1.0).abs() > cfg.clip {
                out.clipped += 1;
            }
            // d(-min(surr1, surr2)) / d logp; zero once the clipped branch binds.
            let g_logp = if surr1 <= surr2 { -ratio * a * actor_scale } else { 0.0 };
            log_prob_grad(&lp_t, c.targets[t], g_logp, &mut dt);
            log_prob_grad(&lp_m, c.modes[t], g_logp, &mut dm);
            entropy_grad(&lp_t, -cfg.entropy_coef * actor_scale, &mut dt);
            entropy_grad(&lp_m, -cfg.entropy_coef * actor_scale, &mut dm);
        }
        d_out.push(vec![dt, dm]);
    }
    learner.actor_net.backward_seq(&learner.actor, &fwd.cache, &d_out, g_actor);

    let cin: Vec<&[f64]> = c.critic_in.iter().map(|v| v.as_slice()).collect();
    let fwd = learner.critic_net.forward_seq(&learner.critic, &cin, &c.h_v);
    let mut d_out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(c.len());
    for t in 0..c.len() {
        let v = fwd.outputs[t][0][0];
        let target = learner.popart.normalize(c.returns[t]);
        let v_old = learner.popart.normalize(c.values[t]);
        let v_clip = v_old + (v - v_old).clamp(-cfg.clip, cfg.clip);
        let l1 = (v - target).powi(2);
        let l2 = (v_clip - target).powi(2);
        out.value += 0.5 * l1.max(l2) * critic_scale;
        let g = if l1 >= l2 || (v - v_old).abs() <= cfg.clip {
            (v - target) * cfg.value_coef * critic_scale
        } else {
            0.0
        };
        d_out.push(vec![vec![g]]);
    }
    learner.critic_net.backward_seq(&learner.critic, &fwd.cache, &d_out, g_critic);
    out
}

/// Clipped-surrogate updates over the buffer: `epochs` passes of `K` shuffled
/// mini-batches of chunks, each re-run from its stored head hidden states.
pub fn ppo_update(
    learner: &mut Learner,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    iteration: u64,
    lr: f64,
) -> Result<UpdateStats> {
    // Advantages normalized over the acting steps of the whole batch.
    let acting: Vec<f64> = buffer
        .chunks
        .iter()
        .flat_map(|c| c.advantages.iter().zip(&c.active).filter(|(_, a)| **a).map(|(v, _)| *v))
        .collect();
    let (mean, std) = if acting.is_empty() {
        (0.0, 1.0)
    } else {
        let n = acting.len() as f64;
        let mean = acting.iter().sum::<f64>() / n;
        let var = acting.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt() + 1e-8)
    };
    let norm_adv: Vec<Vec<f64>> = buffer
        .chunks
        .iter()
        .map(|c| c.advantages.iter().map(|a| (a - mean) / std).collect())
        .collect();

    let adam = cfg.adam();
    let mut rng = rng_stream(cfg.seed, &format!("minibatch/{iteration}"));
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..buffer.chunks.len()).collect();
    let mut first = true;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let n = order.len();
        for k in 0..cfg.minibatches {
            let batch = &order[k * n / cfg.minibatches..(k + 1) * n / cfg.minibatches];
            if batch.is_empty() {
                continue;
            }
            let n_active: usize = batch.iter().map(|&i| buffer.chunks[i].active.iter().filter(|a| **a).count()).sum();
            let n_steps: usize = batch.iter().map(|&i| buffer.chunks[i].len()).sum();
            let actor_scale = if n_active > 0 { 1.0 / n_active as f64 } else { 0.0 };
            let critic_scale = 1.0 / n_steps as f64;
            let mut g_actor = vec![0.0; learner.actor.len()];
            let mut g_critic = vec![0.0; learner.critic.len()];
            let mut loss = ChunkLoss::default();
            for &i in batch {
                let l = chunk_gradients(
                    learner,
                    &buffer.chunks[i],
                    &norm_adv[i],
                    cfg,
                    actor_scale,
                    critic_scale,
                    &mut g_actor,
                    &mut g_critic,
                );
                loss.policy += l.policy;
                loss.value += l.value;
                loss.entropy += l.entropy;
                loss.kl += l.kl;
                loss.clipped += l.clipped;
                loss.max_ratio_dev = loss.max_ratio_dev.max(l.max_ratio_dev);
            }
            let total = loss.total(cfg);
            if !total.is_finite() || g_actor.iter().chain(&g_critic).any(|g| !g.is_finite()) {
                return Err(RlError::NonFinite(format!(
                    "iteration={iteration} epoch={epoch} minibatch={k} policy_loss={} value_loss={} entropy={} \
                     kl={} actor_param_norm={} critic_param_norm={} popart_mu={} popart_sigma={}",
                    loss.policy,
                    loss.value,
                    loss.entropy,
                    loss.kl,
                    l2(&learner.actor),
                    l2(&learner.critic),
                    learner.popart.mu(),
                    learner.popart.sigma()
                )));
            }
            if first {
                stats.initial_ratio_dev = loss.max_ratio_dev;
                first = false;
            }
            let an = clip_grad(&mut g_actor, cfg.max_grad_norm);
            let cn = clip_grad(&mut g_critic, cfg.max_grad_norm);
            adam_step(&mut learner.actor, &g_actor, &adam, lr, &mut learner.actor_adam);
            adam_step(&mut learner.critic, &g_critic, &adam, lr, &mut learner.critic_adam);
            stats.policy_loss += loss.policy;
            stats.value_loss += loss.value;
            stats.entropy += loss.entropy;
            stats.approx_kl += loss.kl;
            stats.clip_frac += loss.clipped as f64 * actor_scale;
            stats.actor_grad_norm += an;
            stats.critic_grad_norm += cn;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        let n = stats.minibatches as f64;
        stats.policy_loss /= n;
        stats.value_loss /= n;
        stats.entropy /= n;
        stats.approx_kl /= n;
        stats.clip_frac /= n;
        stats.actor_grad_norm /= n;
        stats.critic_grad_norm /= n;
    }
    Ok(stats)
}

/// Mean per-episode costs of a greedy evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    pub mean_cost: f64,
    pub cost_epri: f64,
    pub cost_drop: f64,
    pub cost_fail: f64,
    pub cost_bd: f64,
    pub per_agent_cost: Vec<f64>,
    pub episode_costs: Vec<f64>,
}

/// Runs the actor greedily on local observations only.
///
/// # Panics
/// If the environment's global state is read while acting.
pub fn evaluate<E: MultiAgentEnv + ?Sized>(
    env: &mut E,
    actor_net: &RecurrentNet,
    actor: &[f64],
    seeds: &[u64],
) -> EvalMetrics {
    let m = env.num_agents();
    let mut policy = ActorPolicy::new(actor_net.clone(), actor.to_vec(), m, true);
    let mut metrics = EvalMetrics {
        per_agent_cost: vec![0.0; m],
        ..Default::default()
    };
    let reads = env.global_state_reads();
    for &seed in seeds {
        let mut obs = env.reset(seed);
        policy.reset();
        let mut rng = rng_stream(seed, "policy");
        let mut episode = 0.0;
        loop {
            let actions: Vec<Option<Action>> = obs.iter().map(|o| policy.choose(o, &mut rng)).collect();
            let step = env.step(&actions);
            for (agent, c) in &step.costs {
                episode += c.total;
                metrics.cost_epri += c.energy_term;
                metrics.cost_drop += c.drop_term;
                metrics.cost_fail += c.failure_term;
                metrics.cost_bd += c.degradation_term;
                metrics.per_agent_cost[*agent] += c.total;
            }
            obs = step.observations;
            if step.done {
                break;
            }
        }
        metrics.episode_costs.push(episode);
    }
    assert_eq!(env.global_state_reads(), reads, "actor path read the global state");
    let n = seeds.len().max(1) as f64;
    metrics.episodes = seeds.len();
    metrics.mean_cost = metrics.episode_costs.iter().sum::<f64>() / n;
    metrics.cost_epri /= n;
    metrics.cost_drop /= n;
    metrics.cost_fail /= n;
    metrics.cost_bd /= n;
    metrics.per_agent_cost.iter_mut().for_each(|c| *c /= n);
    metrics
}

/// One learning-curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub total_steps: u64,
    pub eval_mean_cost: f64,
    pub eval_cost_epri: f64,
    pub eval_cost_drop: f64,
    pub eval_cost_fail: f64,
    pub eval_cost_bd: f64,
    pub per_agent_costs: Vec<f64>,
}

impl CurvePoint {
    fn from_metrics(total_steps: u64, m: &EvalMetrics) -> Self {
        Self {
            total_steps,
            eval_mean_cost: m.mean_cost,
            eval_cost_epri: m.cost_epri,
            eval_cost_drop: m.cost_drop,
            eval_cost_fail: m.cost_fail,
            eval_cost_bd: m.cost_bd,
            per_agent_costs: m.per_agent_cost.clone(),
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run the actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Dims,
    pub hidden: usize,
    pub train: TrainConfig,
    pub total_steps: u64,
    pub iteration: u64,
    pub actor: BTreeMap<String, Vec<f64>>,
    pub critic: BTreeMap<String, Vec<f64>>,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub popart: PopArt,
    pub curve: Vec<CurvePoint>,
}

impl Checkpoint {
    pub fn capture(learner: &Learner, train: &TrainConfig, total_steps: u64, iteration: u64, curve: Vec<CurvePoint>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            dims: learner.dims,
            hidden: learner.hidden(),
            train: train.clone(),
            total_steps,
            iteration,
            actor: named_views(&learner.actor_net, &learner.actor),
            critic: named_views(&learner.critic_net, &learner.critic),
            actor_adam: learner.actor_adam.clone(),
            critic_adam: learner.critic_adam.clone(),
            popart: learner.popart,
            curve,
        }
    }

    pub fn learner(&self) -> Result<Learner> {
        if self.version != CHECKPOINT_VERSION {
            return Err(RlError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let (actor_net, critic_net) = nets(&self.dims, self.hidden);
        let actor = from_named_views(&actor_net, &self.actor)?;
        let critic = from_named_views(&critic_net, &self.critic)?;
        for (name, st, n) in [("actor", &self.actor_adam, actor.len()), ("critic", &self.critic_adam, critic.len())] {
            if st.m.len() != n || st.v.len() != n {
                return Err(RlError::Checkpoint(format!("{name} optimizer state has wrong length")));
            }
        }
        Ok(Learner {
            dims: self.dims,
            actor_net,
            critic_net,
            actor,
            critic,
            actor_adam: self.actor_adam.clone(),
            critic_adam: self.critic_adam.clone(),
            popart: self.popart,
        })
    }

    /// Errors unless the checkpoint was trained on an environment of this shape.
    pub fn check_dims<E: MultiAgentEnv + ?Sized>(&self, env: &E) -> Result<()> {
        let d = Dims::of(env);
        if d != self.dims {
            return Err(RlError::Shape(format!(
                "checkpoint expects {:?}, environment has {:?}",
                self.dims, d
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RlError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| RlError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| RlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Fixed evaluation seeds used for learning-curve points.
pub fn eval_seeds(cfg: &TrainConfig) -> Vec<u64> {
    (0..cfg.eval_episodes as u64).map(|k| episode_seed(cfg.seed, "eval", k)).collect()
}

/// Runs collect/update iterations until `step_max` environment steps, starting
/// fresh or from `resume`. `make_env` is called twice: one environment for
/// rollouts and one for evaluation.
pub fn train<E: MultiAgentEnv, F: FnMut() -> E>(
    mut make_env: F,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut env = make_env();
    let mut eval_env = make_env();
    let dims = Dims::of(&env);
    let (mut learner, mut total_steps, mut iteration, mut curve) = match resume {
        Some(ck) => {
            ck.check_dims(&env)?;
            if ck.hidden != cfg.hidden {
                return Err(RlError::Shape(format!(
                    "checkpoint hidden size {} differs from config {}",
                    ck.hidden, cfg.hidden
                )));
            }
            (ck.learner()?, ck.total_steps, ck.iteration, ck.curve)
        }
        None => (Learner::new(dims, cfg), 0, 0, Vec::new()),
    };
    let seeds = eval_seeds(cfg);
    while total_steps < cfg.step_max {
        let lr = if cfg.lr_decay {
            cfg.lr * (1.0 - total_steps as f64 / cfg.step_max as f64)
        } else {
            cfg.lr
        };
        let buffer = collect_rollouts(&mut env, &learner, cfg, iteration, false)?;
        total_steps += buffer.env_steps;
        let head = learner.critic_net.heads[0];
        learner.popart.update(&buffer.returns(), &head, &mut learner.critic);
        let stats = ppo_update(&mut learner, &buffer, cfg, iteration, lr)?;
        iteration += 1;
        log::debug!(
            "iter {iteration} steps {total_steps} pi {:.4} v {:.4} ent {:.3} kl {:.5} clip {:.3}",
            stats.policy_loss,
            stats.value_loss,
            stats.entropy,
            stats.approx_kl,
            stats.clip_frac
        );
        if !seeds.is_empty() && (iteration % cfg.eval_every == 0 || total_steps >= cfg.step_max) {
            let m = evaluate(&mut eval_env, &learner.actor_net, &learner.actor, &seeds);
            log::info!("steps {total_steps} eval mean cost {:.4}", m.mean_cost);
            curve.push(CurvePoint::from_metrics(total_steps, &m));
        }
    }
    Ok(Checkpoint::capture(&learner, cfg, total_steps, iteration, curve))
}

/// Action mask helper for environments without offloading structure.
pub fn open_mask(num_targets: usize, num_modes: usize, has_task: bool) -> ActionMask {
    ActionMask {
        has_task,
        targets: vec![true; num_targets],
        num_modes,
    }
}
