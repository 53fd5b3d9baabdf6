//! The multi-agent offloading environment.
//!
//! One agent per mobile device (MD). Each slot an agent with a fresh task picks
//! an executor (itself, another MD over D2D, or an edge device (ED) behind the
//! base station over cellular) and the CPU mode the executor runs it at. Costs
//! are charged per task and credited as negative rewards in the slot the task
//! resolves.
//!
//! Device indices: `0..M` are MDs, `M..M+N` are EDs.

use std::cell::Cell;
use std::collections::BTreeMap;

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::battery::{self, PowerTrace};
use crate::channel::{self, LinkInstance, LinkKind, TransmissionOutcome};
use crate::compute::{self, ExecRequest, ExecutorBudget};
use crate::config::Config;
use crate::device::{DeviceKind, DeviceState};
use crate::rng::{rng_stream, Stream};
use crate::task::{self, Task, TaskType, CYCLES_RANGE, MAX_DEADLINE, SIZE_RANGE};

/// Placement chosen by an agent for its current task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub target: usize,
    pub mode: usize,
}

/// One entry per agent; `None` is a no-op.
pub type JointAction = Vec<Option<Action>>;

/// Valid offloading targets of one agent this slot. All CPU modes are always valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionMask {
    pub has_task: bool,
    pub targets: Vec<bool>,
    pub num_modes: usize,
}

impl ActionMask {
    pub fn allows(&self, a: &Action) -> bool {
        self.has_task && a.mode < self.num_modes && self.targets.get(a.target).copied().unwrap_or(false)
    }

    pub fn valid_targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, ok)| **ok)
            .map(|(h, _)| h)
    }
}

/// Local view of one agent, normalized to `[0, 1]`.
///
/// Layout: own task `(S, C, D, X)` scaled by their maxima (zeros without a task),
/// a has-task flag, distances to all `M+N` devices over the arena side, observed
/// batteries over capacity (zero for disconnected devices), queue backlogs in
/// slots (capped at one), and a one-hot agent id.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub agent: usize,
    pub values: Vec<f64>,
    pub mask: ActionMask,
}

pub fn observation_dim(cfg: &Config) -> usize {
    5 + 3 * cfg.sim.num_devices() + cfg.sim.num_mds
}

/// Length of [`MecEnv::global_state`].
pub fn global_state_dim(cfg: &Config) -> usize {
    let m = cfg.sim.num_mds;
    let h = cfg.sim.num_devices();
    5 * m + 3 * h + m * (m - 1) / 2 + m + 1
}

/// Energy a device has spent so far this episode, joules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub e_tra: f64,
    pub e_rec: f64,
    pub e_exe: f64,
}

impl EnergyLedger {
    pub fn total(&self) -> f64 {
        self.e_tra + self.e_rec + self.e_exe
    }
}

/// Weighted cost terms of one task.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// Prioritized energy `X * (E_tra + E_rec + E_exe)`, joules.
    pub e_pri: f64,
    pub energy_term: f64,
    pub drop_term: f64,
    pub failure_term: f64,
    pub degradation_term: f64,
    pub total: f64,
}

/// One constant-power discharge interval on a device, for battery trace dumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentLog {
    pub device: usize,
    pub t_start: f64,
    pub duration: f64,
    pub power_w: f64,
    pub b_start_j: f64,
}

/// Full resolution of one generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task: Task<f64>,
    pub target: usize,
    pub mode: usize,
    pub link: Option<LinkKind>,
    pub transmission: TransmissionOutcome<f64>,
    pub exec: Option<compute::ExecutionRecord<f64>>,
    pub dropped: bool,
    pub failed: bool,
    pub e_tra: f64,
    pub e_rec: f64,
    pub e_exe: f64,
    pub bd_tx: f64,
    pub bd_rx: f64,
    pub bd_tot: f64,
    pub cost: CostBreakdown,
    /// Slot in which the cost is credited as reward.
    pub reward_slot: usize,
    pub segments: Vec<SegmentLog>,
}

impl TaskRecord {
    pub fn agent(&self) -> usize {
        self.task.origin
    }

    pub fn trace_line(&self) -> TraceLine {
        TraceLine {
            agent: self.task.origin,
            g: self.task.gen_order,
            k: self.task.gen_slot,
            target: self.target,
            mode: self.mode,
            ds: self.dropped as u8,
            fs: self.failed as u8,
            e_tra: self.e_tra,
            e_rec: self.e_rec,
            e_exe: self.e_exe,
            bd_tot: self.bd_tot,
            cost: self.cost.total,
            reward_slot: self.reward_slot,
        }
    }
}

/// JSON-lines record of one resolved task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub agent: usize,
    pub g: u32,
    pub k: usize,
    pub target: usize,
    pub mode: usize,
    #[serde(rename = "Ds")]
    pub ds: u8,
    #[serde(rename = "Fs")]
    pub fs: u8,
    #[serde(rename = "E_tra")]
    pub e_tra: f64,
    #[serde(rename = "E_rec")]
    pub e_rec: f64,
    #[serde(rename = "E_exe")]
    pub e_exe: f64,
    #[serde(rename = "BD_tot")]
    pub bd_tot: f64,
    pub cost: f64,
    pub reward_slot: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<AgentObservation>,
    pub rewards: Vec<f64>,
    pub done: bool,
    /// Tasks credited this slot, in crediting order.
    pub resolved: Vec<TaskRecord>,
    /// Actions supplied for agents without a task.
    pub ignored_actions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pool {
    Mobile(usize),
    BaseStation,
}

struct Placement {
    agent: usize,
    task: Task<f64>,
    action: Action,
    link: Option<LinkKind>,
    transmission: TransmissionOutcome<f64>,
    tx_trace: Option<(usize, PowerTrace<f64>)>,
    tx_short: bool,
    arrival: f64,
}

/// Per-task cost from its outcome terms.
pub fn task_cost(
    kind: TaskType,
    dropped: bool,
    failed: bool,
    e_tra: f64,
    e_rec: f64,
    e_exe: f64,
    bd_tot: f64,
    w: &crate::config::CostWeights,
) -> CostBreakdown {
    let e_pri = kind.weight() as f64 * (e_tra + e_rec + e_exe);
    let energy_term = w.energy * e_pri;
    let drop_term = if dropped { w.drop } else { 0.0 };
    let failure_term = if failed { w.failure } else { 0.0 };
    let degradation_term = w.degradation * bd_tot;
    CostBreakdown {
        e_pri,
        energy_term,
        drop_term,
        failure_term,
        degradation_term,
        total: energy_term + drop_term + failure_term + degradation_term,
    }
}

/// Reward of one agent from the costs credited to it this slot.
pub fn reward(costs: impl IntoIterator<Item = f64>, reward_scale: f64) -> f64 {
    let sum: f64 = costs.into_iter().sum();
    if sum == 0.0 {
        0.0
    } else {
        -reward_scale * sum
    }
}

pub struct MecEnv {
    cfg: Config,
    seed: u64,
    slot: usize,
    devices: Vec<DeviceState<f64>>,
    dist_md: Vec<Vec<f64>>,
    dist_bs: Vec<f64>,
    /// `[slot - 1][device]`, sampled for the whole episode at reset.
    disconnected: Vec<Vec<bool>>,
    current: Vec<Option<Task<f64>>>,
    gen_stream: Stream,
    attr_stream: Stream,
    pending: Vec<TaskRecord>,
    ledgers: Vec<EnergyLedger>,
    returns: Vec<f64>,
    global_reads: Cell<usize>,
}

const MIN_DISTANCE: f64 = 1.0;

impl MecEnv {
    /// Builds an environment already reset with `seed`.
    pub fn new(cfg: Config, seed: u64) -> Self {
        let mut env = Self {
            cfg,
            seed,
            slot: 1,
            devices: Vec::new(),
            dist_md: Vec::new(),
            dist_bs: Vec::new(),
            disconnected: Vec::new(),
            current: Vec::new(),
            gen_stream: rng_stream(seed, "taskgen"),
            attr_stream: rng_stream(seed, "taskattr"),
            pending: Vec::new(),
            ledgers: Vec::new(),
            returns: Vec::new(),
            global_reads: Cell::new(0),
        };
        env.reset(seed);
        env
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn num_agents(&self) -> usize {
        self.cfg.sim.num_mds
    }

    pub fn num_devices(&self) -> usize {
        self.cfg.sim.num_devices()
    }

    /// Current slot, 1-based. Exceeds the episode length once done.
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn is_done(&self) -> bool {
        self.slot > self.cfg.sim.episode_slots
    }

    pub fn devices(&self) -> &[DeviceState<f64>] {
        &self.devices
    }

    pub fn ledgers(&self) -> &[EnergyLedger] {
        &self.ledgers
    }

    /// Cumulative reward per agent this episode.
    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn current_task(&self, agent: usize) -> Option<&Task<f64>> {
        self.current[agent].as_ref()
    }

    /// Times [`Self::global_state`] was called since the last reset.
    pub fn global_state_reads(&self) -> usize {
        self.global_reads.get()
    }

    pub fn distance(&self, from_md: usize, to: usize) -> f64 {
        let m = self.cfg.sim.num_mds;
        if to < m {
            self.dist_md[from_md][to]
        } else {
            self.dist_bs[from_md]
        }
    }

    fn is_disconnected(&self, slot: usize, device: usize) -> bool {
        self.disconnected
            .get(slot - 1)
            .map(|row| row[device])
            .unwrap_or(false)
    }

    pub fn reset(&mut self, seed: u64) -> Vec<AgentObservation> {
        let sim = self.cfg.sim.clone();
        let m = sim.num_mds;
        let h = sim.num_devices();
        let b_max = sim.battery_capacity;
        self.seed = seed;
        self.slot = 1;

        let mut net = rng_stream(seed, "netinit");
        let centre = sim.arena_side / 2.0;
        let mut devices = Vec::with_capacity(h);
        for id in 0..h {
            let (kind, position) = if id < m {
                let x = net.gen_range(0.0..sim.arena_side);
                let y = net.gen_range(0.0..sim.arena_side);
                (DeviceKind::Mobile, (x, y))
            } else {
                (DeviceKind::Edge, (centre, centre))
            };
            devices.push(DeviceState {
                id,
                kind,
                position,
                battery: b_max,
                connected: true,
                queue_tail: 0.0,
                generated: 0,
                processed: 0,
            });
        }
        let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).hypot(a.1 - b.1)).max(MIN_DISTANCE);
        self.dist_md = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { 0.0 } else { dist(devices[i].position, devices[j].position) })
                    .collect()
            })
            .collect();
        self.dist_bs = (0..m).map(|i| dist(devices[i].position, (centre, centre))).collect();
        self.devices = devices;

        let mut disc = rng_stream(seed, "disconnect");
        self.disconnected = (0..sim.episode_slots)
            .map(|_| {
                (0..h)
                    .map(|d| {
                        let p = if d < m { sim.md_disconnect() } else { sim.ed_disconnect() };
                        disc.gen::<f64>() < p
                    })
                    .collect()
            })
            .collect();

        self.gen_stream = rng_stream(seed, "taskgen");
        self.attr_stream = rng_stream(seed, "taskattr");
        self.pending.clear();
        self.ledgers = vec![EnergyLedger::default(); h];
        self.returns = vec![0.0; m];
        self.global_reads.set(0);
        self.current = vec![None; m];
        self.refresh_connectivity();
        self.sample_tasks();
        self.observations()
    }

    fn refresh_connectivity(&mut self) {
        let slot = self.slot;
        for d in 0..self.devices.len() {
            self.devices[d].connected = !self.is_disconnected(slot, d);
        }
    }

    fn sample_tasks(&mut self) {
        let slot = self.slot;
        for i in 0..self.cfg.sim.num_mds {
            let u: f64 = self.gen_stream.gen();
            let draw = task::draw_task(&mut self.attr_stream);
            self.current[i] = if u < self.cfg.sim.task_gen_prob {
                let dev = &mut self.devices[i];
                dev.generated += 1;
                Some(Task::from_draw(&draw, i, dev.generated, slot))
            } else {
                None
            };
        }
    }

    pub fn action_mask(&self, agent: usize) -> ActionMask {
        let m = self.cfg.sim.num_mds;
        let h = self.num_devices();
        let self_connected = self.devices[agent].connected;
        let targets = (0..h)
            .map(|t| {
                if t == agent {
                    true
                } else if !self_connected {
                    false
                } else if t < m {
                    self.dist_md[agent][t] <= self.cfg.sim.d2d_range
                } else {
                    true
                }
            })
            .collect();
        ActionMask {
            has_task: self.current[agent].is_some(),
            targets,
            num_modes: self.cfg.num_modes(),
        }
    }

    fn slot_start(&self, slot: usize) -> f64 {
        (slot - 1) as f64 * self.cfg.sim.slot_length
    }

    fn backlog(&self, d: usize) -> f64 {
        let now = self.slot_start(self.slot.min(self.cfg.sim.episode_slots));
        ((self.devices[d].queue_tail - now).max(0.0) / self.cfg.sim.slot_length).min(1.0)
    }

    fn task_features(t: Option<&Task<f64>>, out: &mut Vec<f64>) {
        match t {
            Some(t) => out.extend_from_slice(&[
                t.size_bits / SIZE_RANGE.1,
                t.cycles / CYCLES_RANGE.1,
                t.deadline / MAX_DEADLINE,
                t.kind.weight() as f64 / 3.0,
                1.0,
            ]),
            None => out.extend_from_slice(&[0.0; 5]),
        }
    }

    pub fn observation(&self, agent: usize) -> AgentObservation {
        let sim = &self.cfg.sim;
        let h = sim.num_devices();
        let mut v = Vec::with_capacity(observation_dim(&self.cfg));
        Self::task_features(self.current[agent].as_ref(), &mut v);
        for d in 0..h {
            v.push((self.distance(agent, d) / sim.arena_side).min(1.0));
        }
        for dev in &self.devices {
            v.push(if dev.connected { dev.battery / sim.battery_capacity } else { 0.0 });
        }
        for d in 0..h {
            v.push(self.backlog(d));
        }
        for i in 0..sim.num_mds {
            v.push(if i == agent { 1.0 } else { 0.0 });
        }
        AgentObservation {
            agent,
            values: v,
            mask: self.action_mask(agent),
        }
    }

    pub fn observations(&self) -> Vec<AgentObservation> {
        (0..self.num_agents()).map(|i| self.observation(i)).collect()
    }

    /// Centralized state for the critic: every current task, true batteries,
    /// backlogs, connectivity, the MD distance matrix, and the slot.
    pub fn global_state(&self) -> Vec<f64> {
        self.global_reads.set(self.global_reads.get() + 1);
        let sim = &self.cfg.sim;
        let m = sim.num_mds;
        let mut v = Vec::with_capacity(global_state_dim(&self.cfg));
        for i in 0..m {
            Self::task_features(self.current[i].as_ref(), &mut v);
        }
        for dev in &self.devices {
            v.push(dev.battery / sim.battery_capacity);
        }
        for d in 0..self.devices.len() {
            v.push(self.backlog(d));
        }
        for dev in &self.devices {
            v.push(if dev.connected { 1.0 } else { 0.0 });
        }
        for i in 0..m {
            for j in i + 1..m {
                v.push((self.dist_md[i][j] / sim.arena_side).min(1.0));
            }
        }
        for i in 0..m {
            v.push((self.dist_bs[i] / sim.arena_side).min(1.0));
        }
        v.push((self.slot.min(sim.episode_slots) - 1) as f64 / sim.episode_slots as f64);
        v
    }

    fn debit(&mut self, device: usize, amount: f64) -> (f64, bool) {
        let dev = &mut self.devices[device];
        if amount <= dev.battery {
            dev.battery -= amount;
            (amount, false)
        } else {
            let charged = dev.battery;
            dev.battery = 0.0;
            (charged, true)
        }
    }

    fn credit_slot(&self, resolved_at: f64, gen_slot: usize) -> usize {
        let slot = (resolved_at / self.cfg.sim.slot_length).ceil() as usize;
        slot.max(gen_slot).min(self.cfg.sim.episode_slots)
    }

    /// Advances one slot.
    ///
    /// # Panics
    /// If called after the episode is done or with the wrong number of actions.
    pub fn step(&mut self, actions: &[Option<Action>]) -> StepResult {
        assert!(!self.is_done(), "step after episode end");
        let m = self.num_agents();
        assert_eq!(actions.len(), m, "one action per agent");
        let t = self.slot;
        let slot_len = self.cfg.sim.slot_length;
        let now = self.slot_start(t);
        let link = self.cfg.link;
        let b_max = self.cfg.sim.battery_capacity;

        // Collect placements and group transmitters per receiver pool.
        let mut ignored = 0;
        let mut requests: Vec<(usize, Task<f64>, Action, Option<LinkKind>, bool)> = Vec::new();
        let mut pools: BTreeMap<Pool, u32> = BTreeMap::new();
        for (i, act) in actions.iter().enumerate() {
            let Some(task) = self.current[i] else {
                if act.is_some() {
                    ignored += 1;
                    debug!("agent {i} acted without a task at slot {t}; treated as no-op");
                }
                continue;
            };
            let Some(mut action) = *act else {
                warn!("agent {i} skipped its task at slot {t}; executing locally");
                requests.push((i, task, Action { target: i, mode: self.cfg.num_modes() - 1 }, None, true));
                continue;
            };
            action.mode = action.mode.min(self.cfg.num_modes() - 1);
            let mask = self.action_mask(i);
            let valid = mask.targets.get(action.target).copied().unwrap_or(false);
            if !valid {
                warn!("agent {i} chose masked target {} at slot {t}", action.target);
            }
            let kind = if action.target == i {
                None
            } else if action.target < m {
                Some(LinkKind::D2d)
            } else {
                Some(LinkKind::Cellular)
            };
            if valid {
                match kind {
                    Some(LinkKind::D2d) => *pools.entry(Pool::Mobile(action.target)).or_default() += 1,
                    Some(LinkKind::Cellular) => *pools.entry(Pool::BaseStation).or_default() += 1,
                    None => {}
                }
            }
            requests.push((i, task, action, kind, valid));
        }

        // Transmissions.
        let mut placements = Vec::with_capacity(requests.len());
        for (i, task, action, kind, valid) in requests {
            let mut p = Placement {
                agent: i,
                task,
                action,
                link: kind,
                transmission: TransmissionOutcome::local(),
                tx_trace: None,
                tx_short: false,
                arrival: now,
            };
            if let Some(kind) = kind {
                if !valid {
                    p.transmission = TransmissionOutcome {
                        offloaded: true,
                        dropped: true,
                        invalid_target: true,
                        ..TransmissionOutcome::local()
                    };
                } else {
                    let pool = match kind {
                        LinkKind::D2d => Pool::Mobile(action.target),
                        LinkKind::Cellular => Pool::BaseStation,
                    };
                    let li = LinkInstance::new(i, action.target, kind, self.distance(i, action.target), pools[&pool], link.n_tot);
                    let mut stream = rng_stream(self.seed, &format!("channel/{t}/{i}"));
                    p.transmission =
                        channel::transmit(task.size_bits, &li, &link, slot_len, self.cfg.sim.d2d_range, &mut stream);
                    if !p.transmission.dropped {
                        let b_before = self.devices[i].battery;
                        let (charged, short) = self.debit(i, p.transmission.e_tra);
                        self.ledgers[i].e_tra += charged;
                        let mut tr = PowerTrace::new(now, b_before, b_max);
                        tr.push(link.tx_power(kind), charged / link.tx_power(kind));
                        p.transmission.e_tra = charged;
                        p.tx_short = short;
                        p.tx_trace = Some((i, tr));
                        p.arrival = now + p.transmission.t_tra;
                    }
                }
            }
            placements.push(p);
        }

        // Arrivals and executions in arrival order.
        let mut order: Vec<usize> = (0..placements.len()).collect();
        order.sort_by(|&a, &b| {
            placements[a]
                .arrival
                .total_cmp(&placements[b].arrival)
                .then(placements[a].agent.cmp(&placements[b].agent))
        });
        let mut records = Vec::with_capacity(placements.len());
        for idx in order {
            records.push(self.resolve(&placements[idx]));
        }
        records.sort_by_key(|r| r.task.origin);

        // Credit costs.
        let mut credited: Vec<TaskRecord> = Vec::new();
        let last = t == self.cfg.sim.episode_slots;
        let pending = std::mem::take(&mut self.pending);
        for r in pending.into_iter().chain(records) {
            if r.reward_slot <= t || last {
                credited.push(r);
            } else {
                self.pending.push(r);
            }
        }
        let mut per_agent: Vec<Vec<f64>> = vec![Vec::new(); m];
        for r in &credited {
            per_agent[r.agent()].push(r.cost.total);
        }
        let scale = self.cfg.cost.reward_scale;
        let rewards: Vec<f64> = per_agent.into_iter().map(|c| reward(c, scale)).collect();
        for (ret, r) in self.returns.iter_mut().zip(&rewards) {
            *ret += r;
        }

        for (d, l) in self.ledgers.iter().enumerate() {
            debug_assert!(l.total() <= b_max * (1.0 + 1e-12), "device {d} overspent");
        }

        self.slot += 1;
        if !self.is_done() {
            self.refresh_connectivity();
            self.sample_tasks();
        } else {
            self.current = vec![None; m];
        }
        StepResult {
            observations: self.observations(),
            rewards,
            done: self.is_done(),
            resolved: credited,
            ignored_actions: ignored,
        }
    }

    fn resolve(&mut self, p: &Placement) -> TaskRecord {
        let t = self.slot;
        let now = self.slot_start(t);
        let b_max = self.cfg.sim.battery_capacity;
        let params = self.cfg.battery;
        let target = p.action.target;
        let mut segments = Vec::new();
        let mut e_rec = 0.0;
        let mut exec = None;
        let dropped = p.transmission.dropped;
        let mut failed = p.tx_short;
        let mut bd_tx = 0.0;
        let mut bd_rx = 0.0;
        let mut resolved_at = now;

        if let Some((dev, tr)) = &p.tx_trace {
            bd_tx = battery::assess(tr, &params).bd;
            for s in &tr.segments {
                segments.push(SegmentLog {
                    device: *dev,
                    t_start: now,
                    duration: s.duration,
                    power_w: s.power,
                    b_start_j: tr.b_start,
                });
            }
        }

        if !dropped && !failed {
            let mut rx = PowerTrace::new(now, self.devices[target].battery, b_max);
            let mut rx_short = false;
            if let Some(kind) = p.link {
                let pr = self.cfg.link.rx_power(kind);
                let b_before = self.devices[target].battery;
                let (charged, short) = self.debit(target, p.transmission.e_rec);
                self.ledgers[target].e_rec += charged;
                e_rec = charged;
                rx_short = short;
                rx.push(pr, charged / pr);
                if charged > 0.0 {
                    segments.push(SegmentLog {
                        device: target,
                        t_start: now,
                        duration: charged / pr,
                        power_w: pr,
                        b_start_j: b_before,
                    });
                }
            }
            let arrival_slot = ((p.arrival / self.cfg.sim.slot_length).floor() as usize + 1).max(t);
            let connected = p.link.is_none() || !self.is_disconnected(arrival_slot, target);
            let table = if target < self.num_agents() { &self.cfg.md_dvfs } else { &self.cfg.ed_dvfs };
            let dev = &self.devices[target];
            let mut budget = ExecutorBudget {
                id: target,
                connected: connected && !rx_short,
                battery: dev.battery,
                queue_tail: dev.queue_tail,
                processed: dev.processed,
            };
            let req = ExecRequest {
                cycles: p.task.cycles,
                deadline: now + p.task.effective_deadline,
                arrival: p.arrival,
                mode: p.action.mode,
            };
            let rec = compute::execute(&req, &mut budget, table);
            let dev = &mut self.devices[target];
            let b_exec_start = dev.battery;
            dev.battery = budget.battery;
            dev.queue_tail = budget.queue_tail;
            dev.processed = budget.processed;
            self.ledgers[target].e_exe += rec.e_exe;
            let mut level = b_exec_start;
            let mut start = rec.t_sta;
            for s in &rec.segments {
                rx.push(s.power, s.duration);
                segments.push(SegmentLog {
                    device: target,
                    t_start: start,
                    duration: s.duration,
                    power_w: s.power,
                    b_start_j: level,
                });
                level -= s.power * s.duration;
                start += s.duration;
            }
            failed = rec.failed;
            resolved_at = rec.t_fin;
            bd_rx = battery::assess(&rx, &params).bd;
            exec = Some(rec);
        }

        let e_tra = p.transmission.e_tra;
        let e_exe = exec.as_ref().map(|r| r.e_exe).unwrap_or(0.0);
        let bd_tot = bd_tx + bd_rx;
        let cost = task_cost(p.task.kind, dropped, failed, e_tra, e_rec, e_exe, bd_tot, &self.cfg.cost);
        TaskRecord {
            task: p.task,
            target,
            mode: p.action.mode,
            link: p.link,
            transmission: p.transmission,
            exec,
            dropped,
            failed,
            e_tra,
            e_rec,
            e_exe,
            bd_tx,
            bd_rx,
            bd_tot,
            cost,
            reward_slot: self.credit_slot(resolved_at, p.task.gen_slot),
            segments,
        }
    }
}
