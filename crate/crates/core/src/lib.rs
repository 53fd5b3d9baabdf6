//! Post-disaster mobile-edge-computing simulator.
//!
//! Mobile devices (MDs) generate tasks and either run them locally, hand them to
//! a neighbour over D2D, or push them over cellular to edge devices (EDs) behind
//! the base station. Links can drop, devices disconnect, every device runs on a
//! battery that wears with use, and CPUs pick a DVFS operating point per task.
//!
//! The closed-form link, execution and battery models are generic over
//! [`Real`] (`f32` or `f64`); the environment and everything above it runs on
//! `f64`, and the aliases below name the concrete instantiations.

pub mod battery;
pub mod channel;
pub mod compute;
pub mod config;
pub mod device;
pub mod env;
pub mod error;
pub mod policies;
pub mod rng;
pub mod scalar;
pub mod task;

pub use config::{load_config, Config, CostWeights, SimConfig};
pub use env::{Action, ActionMask, AgentObservation, JointAction, MecEnv, StepResult, TaskRecord};
pub use error::{Error, Result};
pub use policies::{EpisodeStats, Policy};
pub use rng::{rng_stream, Stream};
pub use scalar::Real;

pub type LinkParams = channel::LinkParams<f64>;
pub type LinkParams32 = channel::LinkParams<f32>;
pub type DvfsTable = compute::DvfsTable<f64>;
pub type DvfsTable32 = compute::DvfsTable<f32>;
pub type BatteryParams = battery::BatteryParams<f64>;
pub type BatteryParams32 = battery::BatteryParams<f32>;
pub type PowerTrace = battery::PowerTrace<f64>;
pub type PowerTrace32 = battery::PowerTrace<f32>;
pub type Task = task::Task<f64>;
pub type DeviceState = device::DeviceState<f64>;
pub type ExecutionRecord = compute::ExecutionRecord<f64>;
pub type TransmissionOutcome = channel::TransmissionOutcome<f64>;
