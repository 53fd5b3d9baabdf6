//! Task records and their sampling distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Delay class of a task: real-time, interactive, or delay-tolerant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskType {
    RealTime = 1,
    Interactive = 2,
    Tolerant = 3,
}

impl TaskType {
    pub fn from_index(x: u8) -> Option<Self> {
        match x {
            1 => Some(Self::RealTime),
            2 => Some(Self::Interactive),
            3 => Some(Self::Tolerant),
            _ => None,
        }
    }

    /// Priority weight applied to the task's energy.
    pub fn weight(self) -> u8 {
        self as u8
    }

    /// Range the sampled deadline is drawn from, seconds.
    pub fn deadline_range(self) -> (f64, f64) {
        match self {
            Self::RealTime => (0.05, 0.5),
            Self::Interactive => (0.5, 1.0),
            Self::Tolerant => (1.0, 3.0),
        }
    }

    /// Clipped deadline used for execution, seconds.
    pub fn deadline_limit(self) -> f64 {
        match self {
            Self::RealTime => 0.3,
            Self::Interactive => 0.75,
            Self::Tolerant => 2.0,
        }
    }
}

/// Bits.
pub const SIZE_RANGE: (f64, f64) = (5e6, 6e6);
/// CPU cycles.
pub const CYCLES_RANGE: (f64, f64) = (0.2e9, 0.6e9);
pub const MAX_DEADLINE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task<T> {
    /// Generating mobile device.
    pub origin: usize,
    /// 1-based per-device generation counter.
    pub gen_order: u32,
    /// 1-based slot of generation.
    pub gen_slot: usize,
    pub size_bits: T,
    pub cycles: T,
    /// Sampled tolerable delay, seconds.
    pub deadline: T,
    pub kind: TaskType,
    /// Delay budget actually enforced by execution, seconds.
    pub effective_deadline: T,
}

/// Attributes of one candidate task. Drawn every slot for every device so stream
/// consumption does not depend on whether the task is generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskDraw {
    pub size_bits: f64,
    pub cycles: f64,
    pub kind: TaskType,
    pub deadline: f64,
}

pub fn draw_task<R: Rng + ?Sized>(rng: &mut R) -> TaskDraw {
    let size_bits = rng.gen_range(SIZE_RANGE.0..SIZE_RANGE.1);
    let cycles = rng.gen_range(CYCLES_RANGE.0..CYCLES_RANGE.1);
    let kind = TaskType::from_index(rng.gen_range(1..=3u8)).expect("1..=3");
    let (lo, hi) = kind.deadline_range();
    let deadline = rng.gen_range(lo..hi);
    TaskDraw {
        size_bits,
        cycles,
        kind,
        deadline,
    }
}

impl<T: Real> Task<T> {
    pub fn from_draw(draw: &TaskDraw, origin: usize, gen_order: u32, gen_slot: usize) -> Self {
        Self {
            origin,
            gen_order,
            gen_slot,
            size_bits: T::lit(draw.size_bits),
            cycles: T::lit(draw.cycles),
            deadline: T::lit(draw.deadline),
            kind: draw.kind,
            effective_deadline: T::lit(draw.kind.deadline_limit()),
        }
    }
}
