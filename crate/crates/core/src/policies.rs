//! Baseline controllers and the episode runner shared by the CLI and trainer.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{Action, AgentObservation, MecEnv, TaskRecord};
use crate::rng::{rng_stream, Stream};

/// Decentralized controller: one decision per agent from its local observation.
pub trait Policy {
    /// Clears per-episode state.
    fn reset(&mut self) {}

    /// Called for every agent every slot. Returns `None` when the agent has no task.
    fn choose(&mut self, obs: &AgentObservation, rng: &mut Stream) -> Option<Action>;

    fn name(&self) -> String;
}

/// Uniform over valid `(target, mode)` pairs.
#[derive(Debug, Clone, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn choose(&mut self, obs: &AgentObservation, rng: &mut Stream) -> Option<Action> {
        if !obs.mask.has_task {
            return None;
        }
        let pairs: Vec<Action> = obs
            .mask
            .valid_targets()
            .flat_map(|target| (0..obs.mask.num_modes).map(move |mode| Action { target, mode }))
            .collect();
        pairs.choose(rng).copied()
    }

    fn name(&self) -> String {
        "random".into()
    }
}

/// Offloads every task to an edge device, cycling through them, at the fastest
/// mode. There is no local fallback: while the device itself is disconnected the
/// attempt is masked and the task is dropped.
#[derive(Debug, Clone)]
pub struct OedPolicy {
    num_mds: usize,
    num_eds: usize,
    next: Vec<usize>,
}

impl OedPolicy {
    pub fn new(num_mds: usize, num_eds: usize) -> Self {
        Self {
            num_mds,
            num_eds,
            next: vec![0; num_mds],
        }
    }
}

impl Policy for OedPolicy {
    fn reset(&mut self) {
        self.next.iter_mut().for_each(|n| *n = 0);
    }

    fn choose(&mut self, obs: &AgentObservation, _rng: &mut Stream) -> Option<Action> {
        if !obs.mask.has_task {
            return None;
        }
        let counter = &mut self.next[obs.agent];
        let target = self.num_mds + *counter;
        *counter = (*counter + 1) % self.num_eds;
        Some(Action {
            target,
            mode: obs.mask.num_modes - 1,
        })
    }

    fn name(&self) -> String {
        "oed".into()
    }
}

/// Executes every task locally at the fastest mode.
#[derive(Debug, Clone, Default)]
pub struct OmdPolicy;

impl Policy for OmdPolicy {
    fn choose(&mut self, obs: &AgentObservation, _rng: &mut Stream) -> Option<Action> {
        obs.mask.has_task.then(|| Action {
            target: obs.agent,
            mode: obs.mask.num_modes - 1,
        })
    }

    fn name(&self) -> String {
        "omd".into()
    }
}

/// Wraps a policy and overrides its CPU mode.
pub struct FixedFrequency<P> {
    pub inner: P,
    pub mode: usize,
}

impl<P: Policy> Policy for FixedFrequency<P> {
    fn reset(&mut self) {
        self.inner.reset();
    }

    fn choose(&mut self, obs: &AgentObservation, rng: &mut Stream) -> Option<Action> {
        self.inner.choose(obs, rng).map(|a| Action {
            target: a.target,
            mode: self.mode.min(obs.mask.num_modes - 1),
        })
    }

    fn name(&self) -> String {
        format!("{}@mode{}", self.inner.name(), self.mode)
    }
}

/// Builds a baseline by name: `random`, `oed` or `omd`.
pub fn baseline(name: &str, num_mds: usize, num_eds: usize) -> Option<Box<dyn Policy>> {
    match name {
        "random" => Some(Box::new(RandomPolicy)),
        "oed" => Some(Box::new(OedPolicy::new(num_mds, num_eds))),
        "omd" => Some(Box::new(OmdPolicy)),
        _ => None,
    }
}

/// Episode totals, per agent and aggregated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub seed: u64,
    pub tasks: usize,
    pub drops: usize,
    pub failures: usize,
    pub cost: f64,
    pub cost_energy: f64,
    pub cost_drop: f64,
    pub cost_fail: f64,
    pub cost_bd: f64,
    pub e_tra: f64,
    pub e_rec: f64,
    pub e_exe: f64,
    pub per_agent_cost: Vec<f64>,
    pub per_agent_return: Vec<f64>,
}

impl EpisodeStats {
    pub fn new(seed: u64, agents: usize) -> Self {
        Self {
            seed,
            per_agent_cost: vec![0.0; agents],
            ..Default::default()
        }
    }

    pub fn add(&mut self, r: &TaskRecord) {
        self.tasks += 1;
        self.drops += r.dropped as usize;
        self.failures += r.failed as usize;
        self.cost += r.cost.total;
        self.cost_energy += r.cost.energy_term;
        self.cost_drop += r.cost.drop_term;
        self.cost_fail += r.cost.failure_term;
        self.cost_bd += r.cost.degradation_term;
        self.e_tra += r.e_tra;
        self.e_rec += r.e_rec;
        self.e_exe += r.e_exe;
        self.per_agent_cost[r.agent()] += r.cost.total;
    }
}

/// Runs one episode of `policy` on `env` reset with `seed`, feeding every
/// resolved task record to `on_record`.
pub fn run_episode(
    env: &mut MecEnv,
    policy: &mut dyn Policy,
    seed: u64,
    mut on_record: impl FnMut(&TaskRecord),
) -> EpisodeStats {
    let mut obs = env.reset(seed);
    policy.reset();
    let mut rng = rng_stream(seed, "policy");
    let mut stats = EpisodeStats::new(seed, env.num_agents());
    loop {
        let actions: Vec<Option<Action>> = obs.iter().map(|o| policy.choose(o, &mut rng)).collect();
        let res = env.step(&actions);
        for r in &res.resolved {
            stats.add(r);
            on_record(r);
        }
        obs = res.observations;
        if res.done {
            break;
        }
    }
    stats.per_agent_return = env.returns().to_vec();
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::env::ActionMask;

    fn obs(agent: usize, targets: Vec<bool>, modes: usize) -> AgentObservation {
        AgentObservation {
            agent,
            values: vec![],
            mask: ActionMask {
                has_task: true,
                targets,
                num_modes: modes,
            },
        }
    }

    #[test]
    fn random_only_self_when_masked() {
        let o = obs(1, vec![false, true, false, false], 3);
        let mut rng = rng_stream(1, "policy");
        for _ in 0..100 {
            let a = RandomPolicy.choose(&o, &mut rng).unwrap();
            assert_eq!(a.target, 1);
            assert!(a.mode < 3);
        }
    }

    #[test]
    fn random_is_reproducible() {
        let o = obs(0, vec![true, true, false, true, true], 3);
        let a: Vec<_> = (0..20).map(|_| ()).scan(rng_stream(5, "policy"), |r, _| RandomPolicy.choose(&o, r)).collect();
        let b: Vec<_> = (0..20).map(|_| ()).scan(rng_stream(5, "policy"), |r, _| RandomPolicy.choose(&o, r)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn random_is_uniform_over_valid_pairs() {
        // Counting oracle: 4 valid targets x 3 modes = 12 equiprobable cells.
        let o = obs(0, vec![true, true, false, true, true], 3);
        let mut rng = rng_stream(9, "policy");
        let n = 100_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            *counts.entry(RandomPolicy.choose(&o, &mut rng).unwrap()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 12);
        assert!(!counts.keys().any(|a| a.target == 2));
        let expected = n as f64 / 12.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 11 degrees of freedom, 0.999 quantile = 31.26.
        assert!(chi2 < 31.26, "chi2 = {chi2}");
    }

    #[test]
    fn oed_round_robin_over_eds() {
        let mut p = OedPolicy::new(3, 2);
        let o = obs(0, vec![true; 5], 3);
        let mut rng = rng_stream(0, "policy");
        let picks: Vec<usize> = (0..6).map(|_| p.choose(&o, &mut rng).unwrap().target).collect();
        assert_eq!(picks, vec![3, 4, 3, 4, 3, 4]);
        assert!(picks.iter().all(|&t| t >= 3));
        assert_eq!(p.choose(&o, &mut rng).unwrap().mode, 2);
    }

    #[test]
    fn omd_stays_home() {
        let o = obs(2, vec![true; 5], 3);
        let mut rng = rng_stream(0, "policy");
        assert_eq!(OmdPolicy.choose(&o, &mut rng), Some(Action { target: 2, mode: 2 }));
        let mut idle = o.clone();
        idle.mask.has_task = false;
        assert_eq!(OmdPolicy.choose(&idle, &mut rng), None);
    }

    #[test]
    fn fixed_frequency_overrides_mode_only() {
        let o = obs(0, vec![true, true, true, true, true], 3);
        let mut wrapped = FixedFrequency { inner: RandomPolicy, mode: 2 };
        let mut r1 = rng_stream(4, "policy");
        let mut r2 = rng_stream(4, "policy");
        for _ in 0..200 {
            let a = wrapped.choose(&o, &mut r1).unwrap();
            let b = RandomPolicy.choose(&o, &mut r2).unwrap();
            assert_eq!(a.mode, 2);
            assert_eq!(a.target, b.target);
        }
    }

    #[test]
    fn single_mode_table_matches_wrapped_max() {
        let mut c = Config::default();
        c.sim.num_mds = 3;
        c.sim.num_eds = 2;
        c.sim.episode_slots = 15;
        let pinned = c.fixed_max_frequency();
        let mut env_a = MecEnv::new(pinned, 0);
        let mut env_b = MecEnv::new(c, 0);
        let a = run_episode(&mut env_a, &mut OmdPolicy, 21, |_| {});
        let b = run_episode(&mut env_b, &mut FixedFrequency { inner: OmdPolicy, mode: 2 }, 21, |_| {});
        assert_eq!(a.cost, b.cost);
    }

    #[test]
    fn omd_episode_has_no_transmissions() {
        let mut c = Config::default();
        c.sim.num_mds = 3;
        c.sim.num_eds = 2;
        c.sim.episode_slots = 30;
        let mut env = MecEnv::new(c, 0);
        let s = run_episode(&mut env, &mut OmdPolicy, 4, |r| {
            assert!(!r.dropped);
            assert_eq!(r.e_tra, 0.0);
        });
        assert_eq!(s.e_tra, 0.0);
        assert_eq!(s.drops, 0);
        assert!(s.tasks > 0);
    }
}
