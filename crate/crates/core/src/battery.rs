//! Per-task state-of-charge bookkeeping and the cycle/calendar degradation model.
//!
//! A [`PowerTrace`] is the sequence of constant-power discharge segments a single
//! task causes on one device. Transition points sit exactly on segment
//! boundaries, so SoC is piecewise linear along the trace.

use serde::{Deserialize, Serialize};

use crate::compute::PowerSegment;
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryParams<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    /// Seconds.
    pub t_life: T,
    /// Coulombs. Only enters through the SoC form of the cycle count.
    pub q_norm: T,
}

impl<T: Real> Default for BatteryParams<T> {
    fn default() -> Self {
        Self {
            a: T::lit(1e-3),
            b: T::lit(2.0),
            c: T::lit(1.0),
            d: T::lit(0.5),
            t_life: T::lit(3.15e8),
            q_norm: T::lit(3600.0),
        }
    }
}

impl<T: Real> BatteryParams<T> {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("a", self.a), ("c", self.c), ("t_life", self.t_life), ("q_norm", self.q_norm)] {
            if !(v > T::zero() && v.is_finite()) {
                return Err(Error::invalid(field, format!("must be > 0, got {v:?}")));
            }
        }
        for (field, v) in [("b", self.b), ("d", self.d)] {
            if !v.is_finite() {
                return Err(Error::invalid(field, "must be finite"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace<T> {
    pub t0: T,
    pub segments: Vec<PowerSegment<T>>,
    /// Battery energy at `t0`, joules.
    pub b_start: T,
    pub b_max: T,
}

impl<T: Real> PowerTrace<T> {
    pub fn new(t0: T, b_start: T, b_max: T) -> Self {
        Self {
            t0,
            segments: Vec::new(),
            b_start,
            b_max,
        }
    }

    pub fn push(&mut self, power: T, duration: T) {
        if duration > T::zero() {
            self.segments.push(PowerSegment { power, duration });
        }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn duration(&self) -> T {
        self.segments.iter().fold(T::zero(), |acc, s| acc + s.duration)
    }

    pub fn energy(&self) -> T {
        self.segments
            .iter()
            .fold(T::zero(), |acc, s| acc + s.power * s.duration)
    }

    /// Battery level at every transition point, `Z + 1` values.
    pub fn levels(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut b = self.b_start;
        out.push(b);
        for s in &self.segments {
            b = b - s.power * s.duration;
            out.push(b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationResult<T> {
    pub soc_avg: T,
    pub soc_dev: T,
    pub n_cyc: T,
    pub bd: T,
}

/// Time-weighted mean SoC of the piecewise-linear trajectory.
pub fn soc_avg<T: Real>(trace: &PowerTrace<T>) -> Result<T> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let two = T::lit(2.0);
    let levels = trace.levels();
    let total = trace.duration();
    let mut acc = T::zero();
    for (z, s) in trace.segments.iter().enumerate() {
        let mid = (levels[z] + levels[z + 1]) / (two * trace.b_max);
        acc = acc + mid * s.duration;
    }
    Ok(acc / total)
}

/// SoC spread `2 * sqrt(3/T * integral (SoC - SoC_avg)^2 dt)` in closed form.
///
/// Each segment contributes `((u + p dt)^3 - u^3) / p` with `u = B_avg - B(t^z)`;
/// the difference of cubes is expanded and divided through by `p`, which is
/// exact and also covers the `p = 0` limit `3 u^2 dt`.
pub fn soc_dev<T: Real>(trace: &PowerTrace<T>) -> Result<T> {
    let avg = soc_avg(trace)?;
    let b_avg = avg * trace.b_max;
    let three = T::lit(3.0);
    let levels = trace.levels();
    let total = trace.duration();
    let mut acc = T::zero();
    for (z, s) in trace.segments.iter().enumerate() {
        let u = b_avg - levels[z];
        let w = s.power * s.duration;
        acc = acc + s.duration * (three * u * u + three * u * w + w * w);
    }
    let radicand = (acc / (total * trace.b_max * trace.b_max)).max(T::zero());
    Ok(T::lit(2.0) * radicand.sqrt())
}

/// Effective cycle count `(SoC(t^0) - SoC(t^Z)) / 2` of a discharge-only trace.
pub fn effective_cycles<T: Real>(trace: &PowerTrace<T>) -> T {
    let levels = trace.levels();
    let first = levels[0];
    let last = levels[levels.len() - 1];
    ((first - last) / (T::lit(2.0) * trace.b_max)).max(T::zero())
}

/// Degradation extent from the three SoC statistics and the elapsed time.
pub fn degradation<T: Real>(soc_avg: T, soc_dev: T, n_cyc: T, duration: T, params: &BatteryParams<T>) -> T {
    let half = T::lit(0.5);
    let cycle = params.a * n_cyc * ((soc_dev - T::one()) * params.b).exp();
    let calendar = T::lit(0.2) * duration / params.t_life;
    (cycle + calendar) * params.c * (params.d * (soc_avg - half)).exp()
}

/// Full degradation assessment of one trace. An empty trace causes no wear.
pub fn assess<T: Real>(trace: &PowerTrace<T>, params: &BatteryParams<T>) -> DegradationResult<T> {
    if trace.is_empty() {
        return DegradationResult {
            soc_avg: trace.b_start / trace.b_max,
            soc_dev: T::zero(),
            n_cyc: T::zero(),
            bd: T::zero(),
        };
    }
    let avg = soc_avg(trace).expect("non-empty");
    let dev = soc_dev(trace).expect("non-empty");
    let n_cyc = effective_cycles(trace);
    DegradationResult {
        soc_avg: avg,
        soc_dev: dev,
        n_cyc,
        bd: degradation(avg, dev, n_cyc, trace.duration(), params),
    }
}

/// Combined wear on the transmitting and executing device of one task.
/// For local execution pass an empty transmitter trace.
pub fn bd_total<T: Real>(tx: &PowerTrace<T>, rx: &PowerTrace<T>, params: &BatteryParams<T>) -> T {
    assess(tx, params).bd + assess(rx, params).bd
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(b0: f64, power: f64, dur: f64) -> PowerTrace<f64> {
        let mut t = PowerTrace::new(0.0, b0, 1000.0);
        t.push(power, dur);
        t
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn soc_avg_examples() {
        assert!(close(soc_avg(&ramp(1000.0, 10.0, 10.0)).unwrap(), 0.95, 1e-15));
        assert!(close(soc_avg(&ramp(500.0, 0.0, 3.0)).unwrap(), 0.5, 1e-15));
        let mut t = PowerTrace::new(0.0, 1000.0, 1000.0);
        t.push(40.0, 5.0);
        t.push(0.0, 5.0);
        assert!(close(soc_avg(&t).unwrap(), 0.85, 1e-15));
        assert!(matches!(soc_avg(&PowerTrace::<f64>::new(0.0, 1.0, 1.0)), Err(Error::EmptyTrace)));
    }

    #[test]
    fn soc_dev_examples() {
        assert!(close(soc_dev(&ramp(1000.0, 10.0, 10.0)).unwrap(), 0.1, 1e-12));
        assert_eq!(soc_dev(&ramp(700.0, 0.0, 4.0)).unwrap(), 0.0);
        assert!(soc_dev(&PowerTrace::<f64>::new(0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn cycle_examples() {
        assert!(close(effective_cycles(&ramp(1000.0, 10.0, 10.0)), 0.05, 1e-14));
        assert_eq!(effective_cycles(&ramp(600.0, 0.0, 10.0)), 0.0);
        assert!(close(effective_cycles(&ramp(1000.0, 100.0, 10.0)), 0.5, 1e-15));
    }

    #[test]
    fn degradation_examples() {
        let p = BatteryParams::<f64>::default();
        assert_eq!(degradation(0.7, 0.3, 0.0, 0.0, &p), 0.0);
        let at_half = degradation(0.5, 0.2, 0.01, 5.0, &p);
        let bare = p.a * 0.01 * ((0.2 - 1.0) * p.b).exp() + 0.2 * 5.0 / p.t_life;
        assert!(close(at_half, bare * p.c, 1e-15));
        // Independently evaluated at 40 digits: 1.035832888939853204e-5.
        let v = degradation(0.95, 0.1, 0.05, 10.0, &p);
        assert!(close(v, 1.035_832_888_939_853_2e-5, 1e-13));
    }

    #[test]
    fn bd_total_composition() {
        let p = BatteryParams::<f64>::default();
        let empty = PowerTrace::<f64>::new(0.0, 1000.0, 1000.0);
        let exec = ramp(990.0, 3.0, 0.4);
        assert_eq!(bd_total(&empty, &exec, &p), assess(&exec, &p).bd);
        assert_eq!(bd_total(&empty, &empty.clone(), &p), 0.0);
        let tx = ramp(1000.0, 0.2, 0.03);
        let mut rx = PowerTrace::new(0.0, 800.0, 1000.0);
        rx.push(0.2, 0.03);
        rx.push(5.7, 0.2);
        assert_eq!(bd_total(&tx, &rx, &p), assess(&tx, &p).bd + assess(&rx, &p).bd);
    }

    proptest! {
        #[test]
        fn splitting_a_segment_changes_nothing(b0 in 100.0f64..1000.0, p in 0.0f64..10.0, dur in 0.01f64..5.0) {
            let params = BatteryParams::<f64>::default();
            let whole = ramp(b0, p, dur);
            let mut halves = PowerTrace::new(0.0, b0, 1000.0);
            halves.push(p, dur / 2.0);
            halves.push(p, dur / 2.0);
            let a = assess(&whole, &params);
            let b = assess(&halves, &params);
            prop_assert!((a.soc_avg - b.soc_avg).abs() < 1e-12);
            prop_assert!((a.soc_dev - b.soc_dev).abs() < 1e-9 * a.soc_dev.max(1e-12));
            prop_assert!((a.n_cyc - b.n_cyc).abs() < 1e-15);
            prop_assert!((a.bd - b.bd).abs() <= 1e-9 * a.bd.max(1e-300));
        }

        #[test]
        fn wear_increases_with_each_statistic(
            avg in 0.0f64..1.0, dev in 0.0f64..1.0, n in 1e-6f64..0.5, dur in 0.0f64..100.0,
            step in 1e-3f64..0.2,
        ) {
            let p = BatteryParams::<f64>::default();
            let base = degradation(avg, dev, n, dur, &p);
            prop_assert!(degradation(avg, dev, n + step, dur, &p) > base);
            prop_assert!(degradation(avg, dev + step, n, dur, &p) > base);
            prop_assert!(degradation(avg + step, dev, n, dur, &p) > base);
        }
    }
}
