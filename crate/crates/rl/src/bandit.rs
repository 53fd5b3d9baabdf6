//! Single-state two-armed bandit exposed through [`MultiAgentEnv`], for
//! checking the learner against a known optimum.

use mec_core::env::CostBreakdown;
use mec_core::{Action, AgentObservation};

use crate::marl::{open_mask, EnvStep, MultiAgentEnv};

#[derive(Debug, Clone)]
pub struct BanditEnv {
    pub payoffs: [f64; 2],
    pub horizon: usize,
    t: usize,
}

impl BanditEnv {
    pub fn new(payoffs: [f64; 2], horizon: usize) -> Self {
        Self { payoffs, horizon, t: 0 }
    }

    pub fn best_arm(&self) -> usize {
        if self.payoffs[1] > self.payoffs[0] {
            1
        } else {
            0
        }
    }

    fn observation(&self) -> AgentObservation {
        AgentObservation {
            agent: 0,
            values: vec![1.0, 1.0],
            mask: open_mask(2, 1, true),
        }
    }
}

impl MultiAgentEnv for BanditEnv {
    fn num_agents(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn num_targets(&self) -> usize {
        2
    }

    fn num_modes(&self) -> usize {
        1
    }

    fn reset(&mut self, _seed: u64) -> Vec<AgentObservation> {
        self.t = 0;
        vec![self.observation()]
    }

    fn global_state(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn step(&mut self, actions: &[Option<Action>]) -> EnvStep {
        let arm = actions[0].map(|a| a.target).unwrap_or(0);
        let reward = self.payoffs[arm];
        self.t += 1;
        let cost = 1.0 - reward;
        EnvStep {
            observations: vec![self.observation()],
            rewards: vec![reward],
            done: self.t >= self.horizon,
            costs: vec![(
                0,
                CostBreakdown {
                    total: cost,
                    energy_term: cost,
                    ..Default::default()
                },
            )],
        }
    }
}
