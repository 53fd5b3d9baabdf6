//! Recurrent multi-agent PPO (shared actor, centralized critic) for the
//! `mec-core` environment, on a small hand-differentiated network stack.

pub mod bandit;
pub mod error;
pub mod marl;
pub mod neural;

pub use error::{Result, RlError};
pub use marl::{
    collect_rollouts, compute_gae, evaluate, ppo_update, train, ActorPolicy, Checkpoint, CurvePoint, EvalMetrics,
    Learner, MultiAgentEnv, RolloutBuffer, TrainConfig,
};
