//! FIFO execution on a single logical core with deadline-triggered acceleration
//! and the DVFS power model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvfsMode<T> {
    /// Hertz.
    pub freq: T,
    /// Volts.
    pub voltage: T,
}

/// Operating points of one device class, slowest first. The last entry is `f_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DvfsTable<T> {
    pub modes: Vec<DvfsMode<T>>,
    pub k_stat: T,
    pub k_dyn: T,
}

impl<T: Real> DvfsTable<T> {
    fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self {
            modes: pairs
                .iter()
                .map(|&(f, v)| DvfsMode {
                    freq: T::lit(f),
                    voltage: T::lit(v),
                })
                .collect(),
            k_stat: T::lit(0.3),
            k_dyn: T::lit(1e-9),
        }
    }

    /// Single-core mobile device table.
    pub fn default_md() -> Self {
        Self::from_pairs(&[(0.8e9, 0.90), (1.4e9, 1.05), (1.8e9, 1.20)])
    }

    /// Edge server table (both cores run the same task, so one faster table).
    pub fn default_ed() -> Self {
        Self::from_pairs(&[(1.0e9, 1.10), (1.8e9, 1.20), (2.6e9, 1.30)])
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn max_mode(&self) -> usize {
        self.modes.len() - 1
    }

    pub fn f_max(&self) -> T {
        self.modes[self.max_mode()].freq
    }

    /// Table restricted to a single operating point (fixed-frequency execution).
    pub fn pinned(&self, mode: usize) -> Self {
        Self {
            modes: vec![self.modes[mode]],
            k_stat: self.k_stat,
            k_dyn: self.k_dyn,
        }
    }

    /// `(1 + k_stat) * k_dyn * V^2 * f`, watts.
    pub fn power(&self, mode: usize) -> T {
        let m = self.modes[mode];
        (T::one() + self.k_stat) * self.k_dyn * m.voltage * m.voltage * m.freq
    }

    pub fn validate(&self, which: &'static str) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::invalid(which, "at least one DVFS mode required"));
        }
        for w in self.modes.windows(2) {
            if !(w[1].freq > w[0].freq) {
                return Err(Error::invalid(which, "frequencies must be strictly increasing"));
            }
            if w[1].voltage < w[0].voltage {
                return Err(Error::invalid(which, "voltages must be non-decreasing"));
            }
        }
        for m in &self.modes {
            if !(m.freq > T::zero() && m.voltage > T::zero()) {
                return Err(Error::invalid(which, "frequency and voltage must be > 0"));
            }
        }
        if !(self.k_stat >= T::zero() && self.k_dyn > T::zero()) {
            return Err(Error::invalid(which, "k_stat >= 0 and k_dyn > 0 required"));
        }
        Ok(())
    }
}

/// Start time under FIFO order: the later of the queue tail and the arrival.
pub fn schedule<T: Real>(queue_tail: T, arrival: T) -> T {
    queue_tail.max(arrival)
}

/// Execution time split into the part run at the chosen frequency before the
/// deadline and the overtime part run at `f_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecSplit<T> {
    pub in_deadline: T,
    pub overtime: T,
}

impl<T: Real> ExecSplit<T> {
    pub fn total(&self) -> T {
        self.in_deadline + self.overtime
    }
}

/// Splits `cycles` of work starting at `start` against the absolute `deadline`.
pub fn exec_time<T: Real>(cycles: T, deadline: T, start: T, freq: T, f_max: T) -> ExecSplit<T> {
    let zero = T::zero();
    let slack = deadline - start;
    let in_deadline = slack.min(cycles / freq).max(zero);
    let leftover = (cycles - slack.max(zero) * freq).max(zero);
    ExecSplit {
        in_deadline,
        overtime: leftover / f_max,
    }
}

/// Constant-power piece of a device's discharge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSegment<T> {
    pub power: T,
    pub duration: T,
}

/// Energy of an execution split under `table`, chosen `mode` then `f_max`.
pub fn exec_energy<T: Real>(table: &DvfsTable<T>, mode: usize, split: &ExecSplit<T>) -> (T, Vec<PowerSegment<T>>) {
    let mut segments = Vec::with_capacity(2);
    if split.in_deadline > T::zero() {
        segments.push(PowerSegment {
            power: table.power(mode),
            duration: split.in_deadline,
        });
    }
    if split.overtime > T::zero() {
        segments.push(PowerSegment {
            power: table.power(table.max_mode()),
            duration: split.overtime,
        });
    }
    let energy = segments
        .iter()
        .fold(T::zero(), |acc, s| acc + s.power * s.duration);
    (energy, segments)
}

/// Drains `segments` from `available` joules. Returns the segments actually run,
/// the energy drawn, and whether the budget ran out first.
pub fn drain_until_depleted<T: Real>(
    segments: &[PowerSegment<T>],
    available: T,
) -> (Vec<PowerSegment<T>>, T, bool) {
    let mut spent = T::zero();
    let mut ran = Vec::with_capacity(segments.len());
    for s in segments {
        let need = s.power * s.duration;
        if spent + need <= available {
            spent = spent + need;
            ran.push(*s);
        } else {
            let left = available - spent;
            if left > T::zero() && s.power > T::zero() {
                ran.push(PowerSegment {
                    power: s.power,
                    duration: left / s.power,
                });
            }
            return (ran, available, true);
        }
    }
    (ran, spent, false)
}

/// Result of placing one task on an executor's queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord<T> {
    pub executor: usize,
    /// 1-based position in the executor's FIFO order.
    pub exec_order: u32,
    pub t_sta: T,
    pub t_fin: T,
    pub t_exe: T,
    pub e_exe: T,
    pub freq: T,
    pub voltage: T,
    pub failed: bool,
    pub segments: Vec<PowerSegment<T>>,
}

/// Executor-side state the execution step reads and mutates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecutorBudget<T> {
    pub id: usize,
    pub connected: bool,
    pub battery: T,
    pub queue_tail: T,
    pub processed: u32,
}

/// Work to place on an executor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecRequest<T> {
    pub cycles: T,
    /// Absolute deadline (generation time plus the effective deadline).
    pub deadline: T,
    pub arrival: T,
    pub mode: usize,
}

/// Places a task on the executor's FIFO queue and debits its battery.
///
/// A disconnected executor fails the task on arrival without running it. An
/// executor whose battery cannot cover the whole execution runs until depletion,
/// is clamped to zero, and fails the task.
pub fn execute<T: Real>(
    req: &ExecRequest<T>,
    exec: &mut ExecutorBudget<T>,
    table: &DvfsTable<T>,
) -> ExecutionRecord<T> {
    let op = table.modes[req.mode];
    exec.processed += 1;
    let mut rec = ExecutionRecord {
        executor: exec.id,
        exec_order: exec.processed,
        t_sta: req.arrival,
        t_fin: req.arrival,
        t_exe: T::zero(),
        e_exe: T::zero(),
        freq: op.freq,
        voltage: op.voltage,
        failed: true,
        segments: Vec::new(),
    };
    if !exec.connected {
        return rec;
    }
    let start = schedule(exec.queue_tail, req.arrival);
    let split = exec_time(req.cycles, req.deadline, start, op.freq, table.f_max());
    let (_, planned) = exec_energy(table, req.mode, &split);
    let (ran, drawn, depleted) = drain_until_depleted(&planned, exec.battery);
    let ran_time = ran.iter().fold(T::zero(), |acc, s| acc + s.duration);
    rec.t_sta = start;
    rec.t_exe = if depleted { ran_time } else { split.total() };
    rec.t_fin = start + rec.t_exe;
    rec.e_exe = drawn;
    rec.failed = depleted;
    rec.segments = ran;
    exec.battery = if depleted { T::zero() } else { exec.battery - drawn };
    exec.queue_tail = rec.t_fin;
    rec
}
