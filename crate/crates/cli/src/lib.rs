//! Experiment runner behind the `mecsim` binary: baseline simulation, training,
//! evaluation, parameter sweeps and per-task traces.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use mec_core::env::TaskRecord;
use mec_core::policies::{baseline, run_episode};
use mec_core::{Config, EpisodeStats, MecEnv, Policy};
use mec_rl::marl::{evaluate, train, Checkpoint, EvalMetrics, TrainConfig};
use mec_rl::RlError;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad input: flags, config files, checkpoints. Exit code 1.
    Validation(String),
    /// Failure while running: output paths, numerical blow-ups. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        write!(f, "{kind}: {}", msg.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<mec_core::Error> for CliError {
    fn from(e: mec_core::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::NonFinite(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn runtime(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(mec_core::load_config(p)?),
        None => Ok(Config::default()),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// Episode `k` of a run started at `seed` uses seed `seed + k`.
pub fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    (0..episodes as u64).map(|k| seed.wrapping_add(k)).collect()
}

pub const POLICIES: [&str; 4] = ["random", "oed", "omd", "rmappo"];

/// Baselines by name; `rmappo` needs a checkpoint whose shape matches `cfg`.
pub fn build_policy(name: &str, cfg: &Config, checkpoint: Option<&Checkpoint>) -> Result<Box<dyn Policy>> {
    if name == "rmappo" {
        let ck = checkpoint.ok_or_else(|| CliError::Validation("policy rmappo requires --checkpoint".into()))?;
        ck.check_dims(&MecEnv::new(cfg.clone(), 0))?;
        return Ok(Box::new(ck.learner()?.policy(true)));
    }
    baseline(name, cfg.sim.num_mds, cfg.sim.num_eds).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown policy {name:?} (expected one of {})",
            POLICIES.join(", ")
        ))
    })
}

pub fn run_policy(
    cfg: &Config,
    policy: &mut dyn Policy,
    seeds: &[u64],
    mut on_record: impl FnMut(&TaskRecord),
) -> Vec<EpisodeStats> {
    let mut env = MecEnv::new(cfg.clone(), seeds.first().copied().unwrap_or(0));
    seeds.iter().map(|&s| run_episode(&mut env, policy, s, &mut on_record)).collect()
}

/// Per-episode CSV row.
#[derive(Debug, Clone, Serialize)]
struct EpisodeRow {
    seed: u64,
    tasks: usize,
    drops: usize,
    failures: usize,
    cost: f64,
    cost_epri: f64,
    cost_drop: f64,
    cost_fail: f64,
    cost_bd: f64,
    e_tra_j: f64,
    e_rec_j: f64,
    e_exe_j: f64,
}

impl From<&EpisodeStats> for EpisodeRow {
    fn from(s: &EpisodeStats) -> Self {
        Self {
            seed: s.seed,
            tasks: s.tasks,
            drops: s.drops,
            failures: s.failures,
            cost: s.cost,
            cost_epri: s.cost_energy,
            cost_drop: s.cost_drop,
            cost_fail: s.cost_fail,
            cost_bd: s.cost_bd,
            e_tra_j: s.e_tra,
            e_rec_j: s.e_rec,
            e_exe_j: s.e_exe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub policy: String,
    pub episodes: usize,
    pub seed: u64,
    pub tasks: usize,
    pub mean_cost: f64,
    pub mean_negated_cost: f64,
    pub mean_cost_epri: f64,
    pub mean_cost_drop: f64,
    pub mean_cost_fail: f64,
    pub mean_cost_bd: f64,
    pub mean_e_tra_j: f64,
    pub mean_e_rec_j: f64,
    pub mean_e_exe_j: f64,
    /// Dropped tasks over generated tasks.
    pub drop_rate: f64,
    /// Failed tasks over delivered (not dropped) tasks.
    pub fail_rate: f64,
    pub mean_per_agent_cost: Vec<f64>,
}

pub fn summarize(policy: &str, seed: u64, stats: &[EpisodeStats]) -> Summary {
    let n = stats.len().max(1) as f64;
    let mean = |f: fn(&EpisodeStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
    let tasks: usize = stats.iter().map(|s| s.tasks).sum();
    let drops: usize = stats.iter().map(|s| s.drops).sum();
    let failures: usize = stats.iter().map(|s| s.failures).sum();
    let agents = stats.first().map(|s| s.per_agent_cost.len()).unwrap_or(0);
    let per_agent = (0..agents)
        .map(|i| stats.iter().map(|s| s.per_agent_cost[i]).sum::<f64>() / n)
        .collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mean_cost = mean(|s| s.cost);
    Summary {
        policy: policy.to_string(),
        episodes: stats.len(),
        seed,
        tasks,
        mean_cost,
        mean_negated_cost: -mean_cost,
        mean_cost_epri: mean(|s| s.cost_energy),
        mean_cost_drop: mean(|s| s.cost_drop),
        mean_cost_fail: mean(|s| s.cost_fail),
        mean_cost_bd: mean(|s| s.cost_bd),
        mean_e_tra_j: mean(|s| s.e_tra),
        mean_e_rec_j: mean(|s| s.e_rec),
        mean_e_exe_j: mean(|s| s.e_exe),
        drop_rate: ratio(drops, tasks),
        fail_rate: ratio(failures, tasks - drops),
        mean_per_agent_cost: per_agent,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| runtime(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| runtime(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(path, e))
}

pub const EPISODE_HEADER: [&str; 12] = [
    "seed", "tasks", "drops", "failures", "cost", "cost_epri", "cost_drop", "cost_fail", "cost_bd", "e_tra_j",
    "e_rec_j", "e_exe_j",
];
pub const SWEEP_HEADER: [&str; 15] = [
    "axis", "value", "policy", "seed", "tasks", "drops", "failures", "cost", "cost_epri", "cost_drop", "cost_fail",
    "cost_bd", "e_tra_j", "e_rec_j", "e_exe_j",
];
pub const DEVICE_HEADER: [&str; 9] = [
    "device", "kind", "generated", "b_initial_j", "b_final_j", "drain_j", "e_tra_j", "e_rec_j", "e_exe_j",
];
pub const SEGMENT_HEADER: [&str; 5] = ["device", "t_start", "duration", "power_w", "b_start_j"];

/// Header-first CSV writer; rows are serialized without their own header.
fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| runtime(path, e))?;
    w.write_record(header).map_err(|e| runtime(path, e))?;
    Ok(w)
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path, header)?;
    for r in rows {
        w.serialize(r).map_err(|e| runtime(path, e))?;
    }
    w.flush().map_err(|e| runtime(path, e))
}

/// `simulate`: writes `episodes.csv` and `summary.json` under `out`.
pub fn cmd_simulate(
    cfg: &Config,
    policy_name: &str,
    checkpoint: Option<&Checkpoint>,
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<Summary> {
    let mut policy = build_policy(policy_name, cfg, checkpoint)?;
    let stats = run_policy(cfg, policy.as_mut(), &episode_seeds(seed, episodes), |_| {});
    create_dir(out)?;
    let rows: Vec<EpisodeRow> = stats.iter().map(EpisodeRow::from).collect();
    write_rows(&out.join("episodes.csv"), &EPISODE_HEADER, &rows)?;
    let summary = summarize(policy_name, seed, &stats);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes a learning curve with one column per agent and a negated-cost column.
pub fn write_curve(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut header: Vec<String> = [
        "total_steps",
        "eval_mean_cost",
        "eval_cost_epri",
        "eval_cost_drop",
        "eval_cost_fail",
        "eval_cost_bd",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..ck.dims.num_agents).map(|i| format!("per_agent_cost_{i}")));
    header.push("eval_negated_cost".into());
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut w = csv_writer(path, &header)?;
    for p in &ck.curve {
        let mut rec = vec![
            p.total_steps.to_string(),
            p.eval_mean_cost.to_string(),
            p.eval_cost_epri.to_string(),
            p.eval_cost_drop.to_string(),
            p.eval_cost_fail.to_string(),
            p.eval_cost_bd.to_string(),
        ];
        rec.extend(p.per_agent_costs.iter().map(|c| c.to_string()));
        rec.push((-p.eval_mean_cost).to_string());
        w.write_record(&rec).map_err(|e| runtime(path, e))?;
    }
    w.flush().map_err(|e| runtime(path, e))
}

/// Trains on `cfg` (with the train config's episode-length override applied).
pub fn train_on(cfg: &Config, tc: &TrainConfig, resume: Option<Checkpoint>) -> Result<Checkpoint> {
    let mut env_cfg = cfg.clone();
    tc.apply_to(&mut env_cfg);
    env_cfg.validate()?;
    Ok(train(|| MecEnv::new(env_cfg.clone(), 0), tc, resume)?)
}

/// `train`: writes `checkpoint.json` and `curve.csv` under `out`.
pub fn cmd_train(cfg: &Config, tc: &TrainConfig, resume: Option<Checkpoint>, out: &Path) -> Result<Checkpoint> {
    let ck = train_on(cfg, tc, resume)?;
    create_dir(out)?;
    ck.save(out.join("checkpoint.json")).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_curve(&out.join("curve.csv"), &ck)?;
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
    pub negated_mean_cost: f64,
    pub negated_per_agent_cost: Vec<f64>,
}

/// `eval`: greedy decentralized evaluation of a checkpoint; writes `metrics.json`.
pub fn cmd_eval(cfg: &Config, ck: &Checkpoint, episodes: usize, seed: u64, out: &Path) -> Result<EvalReport> {
    let mut env = MecEnv::new(cfg.clone(), 0);
    ck.check_dims(&env)?;
    let learner = ck.learner()?;
    let metrics = evaluate(&mut env, &learner.actor_net, &learner.actor, &episode_seeds(seed, episodes));
    let report = EvalReport {
        seed,
        negated_mean_cost: -metrics.mean_cost,
        negated_per_agent_cost: metrics.per_agent_cost.iter().map(|c| -c).collect(),
        metrics,
    };
    create_dir(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Battery,
    GenProb,
    CpuFreq,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "battery" => Ok(Axis::Battery),
            "genprob" => Ok(Axis::GenProb),
            "cpufreq" => Ok(Axis::CpuFreq),
            _ => Err(CliError::Validation(format!(
                "unknown axis {s:?} (expected battery, genprob or cpufreq)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Battery => "battery",
            Axis::GenProb => "genprob",
            Axis::CpuFreq => "cpufreq",
        }
    }
}

/// The base config moved to one point of the axis.
pub fn apply_axis(base: &Config, axis: Axis, value: &str) -> Result<Config> {
    let mut cfg = base.clone();
    let number = || {
        value
            .parse::<f64>()
            .map_err(|_| CliError::Validation(format!("axis {} value {value:?} is not a number", axis.name())))
    };
    match axis {
        Axis::Battery => cfg.sim.battery_capacity = number()?,
        Axis::GenProb => cfg.sim.task_gen_prob = number()?,
        Axis::CpuFreq => match value {
            "dvfs" => {}
            "fixed-max" => cfg = cfg.fixed_max_frequency(),
            _ => {
                return Err(CliError::Validation(format!(
                    "cpufreq value {value:?} (expected dvfs or fixed-max)"
                )))
            }
        },
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub policy: String,
    pub seed: u64,
    pub tasks: usize,
    pub drops: usize,
    pub failures: usize,
    pub cost: f64,
    pub cost_epri: f64,
    pub cost_drop: f64,
    pub cost_fail: f64,
    pub cost_bd: f64,
    pub e_tra_j: f64,
    pub e_rec_j: f64,
    pub e_exe_j: f64,
}

/// Where `rmappo` gets its parameters in a sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepModels {
    /// One checkpoint for every value, or one per value.
    pub checkpoints: Vec<Checkpoint>,
    /// Used to train per value when no checkpoint fits.
    pub train: Option<TrainConfig>,
}

/// Cross product of values and policies; every cell runs the same seeds.
pub fn sweep(
    base: &Config,
    axis: Axis,
    values: &[String],
    policies: &[String],
    seeds: &[u64],
    models: &SweepModels,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || policies.is_empty() {
        return Err(CliError::Validation("sweep needs at least one value and one policy".into()));
    }
    if models.checkpoints.len() > 1 && models.checkpoints.len() != values.len() {
        return Err(CliError::Validation(format!(
            "{} checkpoints given for {} values",
            models.checkpoints.len(),
            values.len()
        )));
    }
    let configs: Vec<Config> = values.iter().map(|v| apply_axis(base, axis, v)).collect::<Result<_>>()?;
    for p in policies {
        if !POLICIES.contains(&p.as_str()) {
            return Err(CliError::Validation(format!("unknown policy {p:?}")));
        }
    }
    let mut shared: Option<Checkpoint> = None;
    let mut rows = Vec::new();
    for (vi, (value, cfg)) in values.iter().zip(&configs).enumerate() {
        for p in policies {
            let trained;
            let ck = if p != "rmappo" {
                None
            } else if models.checkpoints.len() == values.len() {
                Some(&models.checkpoints[vi])
            } else if axis != Axis::CpuFreq {
                if shared.is_none() {
                    shared = Some(match models.checkpoints.first() {
                        Some(c) => c.clone(),
                        None => train_on(base, &models.train.clone().unwrap_or_default(), None)?,
                    });
                }
                shared.as_ref()
            } else {
                trained = train_on(cfg, &models.train.clone().unwrap_or_default(), None)?;
                Some(&trained)
            };
            let mut policy = build_policy(p, cfg, ck)?;
            for s in run_policy(cfg, policy.as_mut(), seeds, |_| {}) {
                let e = EpisodeRow::from(&s);
                rows.push(SweepRow {
                    axis: axis.name().into(),
                    value: value.clone(),
                    policy: p.clone(),
                    seed: e.seed,
                    tasks: e.tasks,
                    drops: e.drops,
                    failures: e.failures,
                    cost: e.cost,
                    cost_epri: e.cost_epri,
                    cost_drop: e.cost_drop,
                    cost_fail: e.cost_fail,
                    cost_bd: e.cost_bd,
                    e_tra_j: e.e_tra_j,
                    e_rec_j: e.e_rec_j,
                    e_exe_j: e.e_exe_j,
                });
            }
        }
    }
    Ok(rows)
}

pub fn cmd_sweep(
    base: &Config,
    axis: Axis,
    values: &[String],
    policies: &[String],
    seeds: &[u64],
    models: &SweepModels,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    let rows = sweep(base, axis, values, policies, seeds, models)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_rows(out, &SWEEP_HEADER, &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRow {
    pub device: usize,
    pub kind: String,
    pub generated: usize,
    pub b_initial_j: f64,
    pub b_final_j: f64,
    pub drain_j: f64,
    pub e_tra_j: f64,
    pub e_rec_j: f64,
    pub e_exe_j: f64,
}

/// `trace`: one episode with per-task JSON lines (`tasks.jsonl`), every
/// constant-power battery segment (`battery.csv`) and per-device drains
/// (`devices.csv`).
pub fn cmd_trace(cfg: &Config, policy_name: &str, checkpoint: Option<&Checkpoint>, seed: u64, out: &Path) -> Result<Vec<DeviceRow>> {
    let mut policy = build_policy(policy_name, cfg, checkpoint)?;
    create_dir(out)?;
    let tasks_path = out.join("tasks.jsonl");
    let mut tasks = BufWriter::new(File::create(&tasks_path).map_err(|e| runtime(&tasks_path, e))?);
    let battery_path = out.join("battery.csv");
    let mut battery = csv_writer(&battery_path, &SEGMENT_HEADER)?;
    let mut env = MecEnv::new(cfg.clone(), seed);
    let initial: Vec<f64> = {
        env.reset(seed);
        env.devices().iter().map(|d| d.battery).collect()
    };
    let mut err = None;
    run_episode(&mut env, policy.as_mut(), seed, |r| {
        if err.is_some() {
            return;
        }
        let line = serde_json::to_string(&r.trace_line()).expect("trace line serializes");
        if let Err(e) = writeln!(tasks, "{line}") {
            err = Some(runtime(&tasks_path, e));
        }
        for s in &r.segments {
            if let Err(e) = battery.serialize(s) {
                err = Some(runtime(&battery_path, e));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    tasks.flush().map_err(|e| runtime(&tasks_path, e))?;
    battery.flush().map_err(|e| runtime(&battery_path, e))?;
    let rows: Vec<DeviceRow> = env
        .devices()
        .iter()
        .zip(env.ledgers())
        .zip(&initial)
        .map(|((d, l), b0)| DeviceRow {
            device: d.id,
            kind: format!("{:?}", d.kind).to_lowercase(),
            generated: d.generated as usize,
            b_initial_j: *b0,
            b_final_j: d.battery,
            drain_j: b0 - d.battery,
            e_tra_j: l.e_tra,
            e_rec_j: l.e_rec,
            e_exe_j: l.e_exe,
        })
        .collect();
    write_rows(&out.join("devices.csv"), &DEVICE_HEADER, &rows)?;
    Ok(rows)
}

/// Splits a comma-separated flag value.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect()
}
